//! Alternating adversarial training loop: several discriminator updates per
//! joint generator update, Adam with a linear late-run learning-rate decay,
//! per-step loss records, and binary checkpoints that resume bit-compatibly
//! at epoch boundaries.
//!
//! All randomness (shuffling, discriminator batch draws) comes from streams
//! derived from the master seed and the epoch index, so a run interrupted at
//! an epoch boundary and resumed from its checkpoint replays the exact same
//! batch sequence.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    adv_loss_d_grad, adv_loss_g_grad, cycle_term_grad, total_loss, CycleMode, LossConfig,
    LossError, LossReport,
};
use crate::networks::{CycleGanSeeds, DiscSpec, Discriminator, Generator, GeneratorSpec, NetworkError};
use crate::params::{Grads, Params};
use crate::perceptual::{FeatureExtractor, PerceptualError};
use crate::scalar::{derive_seed, Real};
use crate::store::{self, StoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}; aborting")]
    NonFinite { term: &'static str, step: u64 },
    #[error("epoch {epoch} outside 0..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint meta malformed: {0}")]
    BadCheckpoint(String),
    #[error("data pair {index}: {message}")]
    BadPair { index: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Perceptual(#[from] PerceptualError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub decay_start: usize,
    pub batch_size: usize,
    pub d_steps_per_g: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-3,
            epochs: 50,
            decay_start: 40,
            batch_size: 2,
            d_steps_per_g: 10,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.decay_start > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "decay_start {} exceeds epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.d_steps_per_g < 1 {
            return Err(TrainError::BadConfig("d_steps_per_g must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        self.loss
            .validate()
            .map_err(TrainError::BadConfig)?;
        Ok(())
    }
}

/// Constant `lr0` before `decay_start`, then linear to zero at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch > cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    if epoch < cfg.decay_start {
        return Ok(cfg.lr0);
    }
    if cfg.epochs == cfg.decay_start {
        return Ok(0.0);
    }
    let remaining = (cfg.epochs - epoch) as f64;
    let window = (cfg.epochs - cfg.decay_start) as f64;
    Ok(cfg.lr0 * remaining / window)
}

/// Bias-corrected Adam over a named parameter set. Moment arrays appear
/// lazily the first time a parameter receives a gradient; the step counter
/// advances once per `step` call.
pub struct Adam<S: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Params<S>,
    pub v: Params<S>,
}

impl<S: Real> Adam<S> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<S>, grads: &Grads<S>, lr: f64) {
        self.t += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let eps = S::of_f64(self.eps);
        let corr1 = S::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::of_f64(lr);
        let one = S::one();
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                self.m.insert(name, ndarray::ArrayD::zeros(g.raw_dim()));
                self.v.insert(name, ndarray::ArrayD::zeros(g.raw_dim()));
            }
            let m = self.m.get_mut(name);
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
            let m = self.m.get(name).clone();
            let v = self.v.get_mut(name);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
            let v = self.v.get(name);
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(&m)
                .and(v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / corr1;
                    let vhat = vv / corr2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// The four trained networks: blur→sharp and sharp→blur generators, plus
/// the blur-domain and sharp-domain discriminators.
pub struct CycleGan<S: Real> {
    pub g_b2s: Generator<S>,
    pub g_s2b: Generator<S>,
    pub d_a: Discriminator<S>,
    pub d_b: Discriminator<S>,
}

impl<S: Real> CycleGan<S> {
    pub fn build(gen_spec: GeneratorSpec, disc_spec: DiscSpec, seed: u64) -> Self {
        let seeds = CycleGanSeeds::from_master(seed);
        Self {
            g_b2s: Generator::build(gen_spec, seeds.g_b2s),
            g_s2b: Generator::build(gen_spec, seeds.g_s2b),
            d_a: Discriminator::build(disc_spec, seeds.d_a),
            d_b: Discriminator::build(disc_spec, seeds.d_b),
        }
    }
}

/// Source of aligned (blur, sharp) training pairs in CHW layout, values in
/// [-1, 1].
pub trait PairSource<S: Real> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn pair(&self, index: usize) -> Result<(Array3<S>, Array3<S>), TrainError>;
}

/// In-memory pair list, mainly for tests and toy fixtures.
pub struct MemoryPairs<S: Real>(pub Vec<(Array3<S>, Array3<S>)>);

impl<S: Real> PairSource<S> for MemoryPairs<S> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn pair(&self, index: usize) -> Result<(Array3<S>, Array3<S>), TrainError> {
        let (b, s) = &self.0[index];
        Ok((b.clone(), s.clone()))
    }
}

fn stack<S: Real>(images: &[Array3<S>]) -> Array4<S> {
    let views: Vec<_> = images.iter().map(|im| im.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform image shapes")
}

fn gather<S: Real, D: PairSource<S> + ?Sized>(
    data: &D,
    indices: &[usize],
) -> Result<(Array4<S>, Array4<S>), TrainError> {
    let mut blurs = Vec::with_capacity(indices.len());
    let mut sharps = Vec::with_capacity(indices.len());
    for &i in indices {
        let (b, s) = data.pair(i)?;
        if b.dim() != s.dim() {
            return Err(TrainError::BadPair {
                index: i,
                message: format!("blur {:?} vs sharp {:?}", b.dim(), s.dim()),
            });
        }
        blurs.push(b);
        sharps.push(s);
    }
    Ok((stack(&blurs), stack(&sharps)))
}

fn ensure_finite<S: Real>(value: S, term: &'static str, step: u64) -> Result<f64, TrainError> {
    let v = value.as_f64();
    if !v.is_finite() {
        return Err(TrainError::NonFinite { term, step });
    }
    Ok(v)
}

/// Owns the networks, the frozen feature extractor, and the optimizer state
/// for one training run.
pub struct Trainer<S: Real> {
    pub nets: CycleGan<S>,
    pub extractor: FeatureExtractor<S>,
    pub cfg: TrainConfig,
    pub gen_spec: GeneratorSpec,
    pub disc_spec: DiscSpec,
    pub opt_g_b2s: Adam<S>,
    pub opt_g_s2b: Adam<S>,
    pub opt_d_a: Adam<S>,
    pub opt_d_b: Adam<S>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Completed generator steps.
    pub step: u64,
    /// Completed discriminator steps.
    pub d_step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    epoch: usize,
    step: u64,
    d_step_count: u64,
    config: TrainConfig,
    gen_spec: GeneratorSpec,
    disc_spec: DiscSpec,
    adam_t: [u64; 4],
}

const CHECKPOINT_FORMAT: &str = "cycledeblur-checkpoint-v1";

impl<S: Real> Trainer<S> {
    pub fn new(
        gen_spec: GeneratorSpec,
        disc_spec: DiscSpec,
        extractor: FeatureExtractor<S>,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let nets = CycleGan::build(gen_spec, disc_spec, cfg.seed);
        Ok(Self {
            nets,
            extractor,
            gen_spec,
            disc_spec,
            opt_g_b2s: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_g_s2b: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_d_a: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_d_b: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            cfg,
            epoch: 0,
            step: 0,
            d_step_count: 0,
        })
    }

    /// One discriminator update on a fresh batch: both discriminators learn
    /// to separate their real domain from the opposite generator's output.
    fn d_step(&mut self, blur: &Array4<S>, sharp: &Array4<S>, lr: f64) -> Result<(), TrainError> {
        let fake_sharp = self.nets.g_b2s.forward(blur)?;
        let fake_blur = self.nets.g_s2b.forward(sharp)?;
        let kind = self.cfg.loss.adv_kind;
        let step = self.step + 1;

        let (real_scores, real_tape) = self.nets.d_a.forward_train(blur)?;
        let (fake_scores, fake_tape) = self.nets.d_a.forward_train(&fake_blur)?;
        let (loss_a, d_real, d_fake) = adv_loss_d_grad(&real_scores, &fake_scores, kind);
        ensure_finite(loss_a, "blur-discriminator loss", step)?;
        let (mut grads_a, _) = self.nets.d_a.backward(&real_tape, &d_real);
        let (grads_a_fake, _) = self.nets.d_a.backward(&fake_tape, &d_fake);
        grads_a.accumulate(&grads_a_fake);
        self.opt_d_a.step(&mut self.nets.d_a.params, &grads_a, lr);

        let (real_scores, real_tape) = self.nets.d_b.forward_train(sharp)?;
        let (fake_scores, fake_tape) = self.nets.d_b.forward_train(&fake_sharp)?;
        let (loss_b, d_real, d_fake) = adv_loss_d_grad(&real_scores, &fake_scores, kind);
        ensure_finite(loss_b, "sharp-discriminator loss", step)?;
        let (mut grads_b, _) = self.nets.d_b.backward(&real_tape, &d_real);
        let (grads_b_fake, _) = self.nets.d_b.backward(&fake_tape, &d_fake);
        grads_b.accumulate(&grads_b_fake);
        self.opt_d_b.step(&mut self.nets.d_b.params, &grads_b, lr);

        self.d_step_count += 1;
        Ok(())
    }

    /// One joint generator update: adversarial terms through the frozen
    /// discriminators plus alpha-weighted feature-space cycle terms.
    fn g_step(
        &mut self,
        blur: &Array4<S>,
        sharp: &Array4<S>,
        lr: f64,
        epoch: usize,
        d_steps: usize,
    ) -> Result<LossReport, TrainError> {
        let cfg = self.cfg.loss;
        let alpha = S::of_f64(cfg.alpha);
        let step = self.step + 1;

        let (fake_sharp, tape_b2s) = self.nets.g_b2s.forward_train(blur)?;
        let (fake_blur, tape_s2b) = self.nets.g_s2b.forward_train(sharp)?;

        let (scores_sharp, dtape_b) = self.nets.d_b.forward_train(&fake_sharp)?;
        let (adv1, d_scores) = adv_loss_g_grad(&scores_sharp, cfg.adv_kind);
        let adv1 = ensure_finite(adv1, "deblur adversarial loss", step)?;
        let (_, mut d_fake_sharp) = self.nets.d_b.backward(&dtape_b, &d_scores);

        let (scores_blur, dtape_a) = self.nets.d_a.forward_train(&fake_blur)?;
        let (adv2, d_scores) = adv_loss_g_grad(&scores_blur, cfg.adv_kind);
        let adv2 = ensure_finite(adv2, "reblur adversarial loss", step)?;
        let (_, mut d_fake_blur) = self.nets.d_a.backward(&dtape_a, &d_scores);

        let mut grads_b2s = Grads::new();
        let mut grads_s2b = Grads::new();
        let mut cycle1 = 0.0;
        let mut cycle2 = 0.0;

        let paired = matches!(cfg.cycle_mode, CycleMode::Paired | CycleMode::Both);
        let recon = matches!(cfg.cycle_mode, CycleMode::Reconstruction | CycleMode::Both);

        if paired {
            let (c1, d_gen) = cycle_term_grad(&self.extractor, sharp, &fake_sharp, cfg.cycle_dist)?;
            cycle1 += ensure_finite(c1, "sharp cycle loss", step)?;
            d_fake_sharp.zip_mut_with(&d_gen, |a, &b| *a += alpha * b);
            let (c2, d_gen) = cycle_term_grad(&self.extractor, blur, &fake_blur, cfg.cycle_dist)?;
            cycle2 += ensure_finite(c2, "blur cycle loss", step)?;
            d_fake_blur.zip_mut_with(&d_gen, |a, &b| *a += alpha * b);
        }
        if recon {
            let (recon_blur, tape_s2b_rt) = self.nets.g_s2b.forward_train(&fake_sharp)?;
            let (c1, d_gen) = cycle_term_grad(&self.extractor, blur, &recon_blur, cfg.cycle_dist)?;
            cycle1 += ensure_finite(c1, "blur round-trip loss", step)?;
            let (g2, d_fs) = self.nets.g_s2b.backward(&tape_s2b_rt, &d_gen.mapv(|v| alpha * v));
            grads_s2b.accumulate(&g2);
            d_fake_sharp.zip_mut_with(&d_fs, |a, &b| *a += b);

            let (recon_sharp, tape_b2s_rt) = self.nets.g_b2s.forward_train(&fake_blur)?;
            let (c2, d_gen) = cycle_term_grad(&self.extractor, sharp, &recon_sharp, cfg.cycle_dist)?;
            cycle2 += ensure_finite(c2, "sharp round-trip loss", step)?;
            let (g1, d_fb) = self.nets.g_b2s.backward(&tape_b2s_rt, &d_gen.mapv(|v| alpha * v));
            grads_b2s.accumulate(&g1);
            d_fake_blur.zip_mut_with(&d_fb, |a, &b| *a += b);
        }

        let (g1, _) = self.nets.g_b2s.backward(&tape_b2s, &d_fake_sharp);
        grads_b2s.accumulate(&g1);
        let (g2, _) = self.nets.g_s2b.backward(&tape_s2b, &d_fake_blur);
        grads_s2b.accumulate(&g2);

        self.opt_g_b2s.step(&mut self.nets.g_b2s.params, &grads_b2s, lr);
        self.opt_g_s2b.step(&mut self.nets.g_s2b.params, &grads_s2b, lr);

        let total = total_loss(adv1 + adv2, cycle1 + cycle2, cfg.alpha);
        if !total.is_finite() {
            return Err(TrainError::NonFinite {
                term: "total loss",
                step,
            });
        }
        self.step = step;
        Ok(LossReport {
            step,
            epoch,
            lr,
            adv1,
            adv2,
            cycle1,
            cycle2,
            total,
            d_steps,
        })
    }

    /// Discriminator phase on freshly drawn batches, then one generator
    /// update on the given batch.
    pub fn train_step<D: PairSource<S> + ?Sized>(
        &mut self,
        data: &D,
        g_indices: &[usize],
        d_rng: &mut ChaCha8Rng,
        epoch: usize,
    ) -> Result<LossReport, TrainError> {
        let lr = lr_schedule(epoch, &self.cfg)?;
        let n = data.len();
        for _ in 0..self.cfg.d_steps_per_g {
            let indices: Vec<usize> =
                (0..self.cfg.batch_size).map(|_| d_rng.gen_range(0..n)).collect();
            let (blur, sharp) = gather(data, &indices)?;
            self.d_step(&blur, &sharp, lr)?;
        }
        let (blur, sharp) = gather(data, g_indices)?;
        self.g_step(&blur, &sharp, lr, epoch, self.cfg.d_steps_per_g)
    }

    /// Full training run from the current epoch to `cfg.epochs`. Checkpoints
    /// are written into `checkpoint_dir` at the configured cadence and at the
    /// end; per-step records go to `log_sink` as JSON lines.
    pub fn fit<D: PairSource<S> + ?Sized>(
        &mut self,
        data: &D,
        checkpoint_dir: Option<&Path>,
        mut log_sink: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let n = data.len();
        let steps_per_epoch = n / self.cfg.batch_size;
        let mut reports = Vec::new();
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[0xE0, epoch as u64]));
            order.shuffle(&mut shuffle_rng);
            let mut d_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[0xD0, epoch as u64]));
            for s in 0..steps_per_epoch {
                let g_indices = &order[s * self.cfg.batch_size..(s + 1) * self.cfg.batch_size];
                let report = self.train_step(data, g_indices, &mut d_rng, epoch)?;
                if let Some(sink) = log_sink.as_mut() {
                    serde_json::to_writer(&mut **sink, &report)
                        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
                    writeln!(sink)?;
                }
                reports.push(report);
            }
            self.epoch += 1;
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs {
                    self.save_checkpoint(&dir.join(format!("checkpoint-{:04}.cdts", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(&dir.join("checkpoint-final.cdts"))?;
        }
        Ok(reports)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            step: self.step,
            d_step_count: self.d_step_count,
            config: self.cfg,
            gen_spec: self.gen_spec,
            disc_spec: self.disc_spec,
            adam_t: [
                self.opt_g_b2s.t,
                self.opt_g_s2b.t,
                self.opt_d_a.t,
                self.opt_d_b.t,
            ],
        };
        let meta = serde_json::to_value(&meta)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        let mut arrays: Vec<(String, ndarray::ArrayViewD<'_, S>)> = Vec::new();
        let nets: [(&str, &Params<S>); 4] = [
            ("g_b2s", &self.nets.g_b2s.params),
            ("g_s2b", &self.nets.g_s2b.params),
            ("d_a", &self.nets.d_a.params),
            ("d_b", &self.nets.d_b.params),
        ];
        for (prefix, params) in nets {
            for (name, view) in params.view_entries() {
                arrays.push((format!("{prefix}.{name}"), view));
            }
        }
        let opts: [(&str, &Adam<S>); 4] = [
            ("g_b2s", &self.opt_g_b2s),
            ("g_s2b", &self.opt_g_s2b),
            ("d_a", &self.opt_d_a),
            ("d_b", &self.opt_d_b),
        ];
        for (prefix, opt) in opts {
            for (name, view) in opt.m.view_entries() {
                arrays.push((format!("adam.{prefix}.m.{name}"), view));
            }
            for (name, view) in opt.v.view_entries() {
                arrays.push((format!("adam.{prefix}.v.{name}"), view));
            }
        }
        store::write_tensors::<S>(path, &meta, &arrays)?;
        Ok(())
    }

    /// Load only the blur-to-sharp generator from a checkpoint, enough for
    /// inference without optimizer state or the feature extractor.
    pub fn load_generator_b2s(path: &Path) -> Result<Generator<S>, TrainError> {
        let (meta, mut arrays) = store::read_tensors::<S>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(TrainError::BadCheckpoint(format!(
                "unknown format tag {}",
                meta.format
            )));
        }
        let mut gen = Generator::build(meta.gen_spec, 0);
        let names: Vec<String> = gen.params.names().map(str::to_owned).collect();
        for name in names {
            let stored = arrays
                .swap_remove(&format!("g_b2s.{name}"))
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing array g_b2s.{name}")))?;
            let slot = gen.params.get_mut(&name);
            if stored.shape() != slot.shape() {
                return Err(TrainError::BadCheckpoint(format!(
                    "array g_b2s.{name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored;
        }
        Ok(gen)
    }

    pub fn load_checkpoint(
        path: &Path,
        extractor: FeatureExtractor<S>,
    ) -> Result<Self, TrainError> {
        let (meta, mut arrays) = store::read_tensors::<S>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(TrainError::BadCheckpoint(format!(
                "unknown format tag {}",
                meta.format
            )));
        }
        let mut trainer = Trainer::new(meta.gen_spec, meta.disc_spec, extractor, meta.config)?;
        trainer.epoch = meta.epoch;
        trainer.step = meta.step;
        trainer.d_step_count = meta.d_step_count;

        {
            let nets: [(&str, &mut Params<S>); 4] = [
                ("g_b2s", &mut trainer.nets.g_b2s.params),
                ("g_s2b", &mut trainer.nets.g_s2b.params),
                ("d_a", &mut trainer.nets.d_a.params),
                ("d_b", &mut trainer.nets.d_b.params),
            ];
            for (prefix, params) in nets {
                let names: Vec<String> = params.names().map(str::to_owned).collect();
                for name in names {
                    let stored = arrays
                        .swap_remove(&format!("{prefix}.{name}"))
                        .ok_or_else(|| {
                            TrainError::BadCheckpoint(format!("missing array {prefix}.{name}"))
                        })?;
                    let slot = params.get_mut(&name);
                    if stored.shape() != slot.shape() {
                        return Err(TrainError::BadCheckpoint(format!(
                            "array {prefix}.{name} has shape {:?}, expected {:?}",
                            stored.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = stored;
                }
            }
        }
        let opts: [(&str, &mut Adam<S>); 4] = [
            ("g_b2s", &mut trainer.opt_g_b2s),
            ("g_s2b", &mut trainer.opt_g_s2b),
            ("d_a", &mut trainer.opt_d_a),
            ("d_b", &mut trainer.opt_d_b),
        ];
        for ((prefix, opt), t) in opts.into_iter().zip(meta.adam_t) {
            opt.t = t;
            let m_prefix = format!("adam.{prefix}.m.");
            let v_prefix = format!("adam.{prefix}.v.");
            let keys: Vec<String> = arrays
                .keys()
                .filter(|k| k.starts_with(&m_prefix) || k.starts_with(&v_prefix))
                .cloned()
                .collect();
            for key in keys {
                let arr = arrays.swap_remove(&key).expect("key listed above");
                if let Some(name) = key.strip_prefix(&m_prefix) {
                    opt.m.insert(name, arr);
                } else if let Some(name) = key.strip_prefix(&v_prefix) {
                    opt.v.insert(name, arr);
                }
            }
        }
        if !arrays.is_empty() {
            let leftover: Vec<&String> = arrays.keys().take(3).collect();
            return Err(TrainError::BadCheckpoint(format!(
                "unrecognized arrays in checkpoint, e.g. {leftover:?}"
            )));
        }
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array};
    use crate::networks::GeneratorKind;

    fn toy_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            decay_start: 1,
            batch_size: 2,
            d_steps_per_g: 2,
            seed,
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    fn toy_gen_spec() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::UNet,
            base: 2,
            depth: 2,
            blocks: 2,
        }
    }

    fn toy_disc_spec() -> DiscSpec {
        DiscSpec { base: 2, n_down: 1 }
    }

    fn toy_data(n: usize, seed: u64) -> MemoryPairs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|_| {
                let sharp = Array::from_shape_fn((3, 16, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
                let blur = &sharp * 0.8;
                (blur, sharp)
            })
            .collect();
        MemoryPairs(pairs)
    }

    fn toy_trainer(seed: u64) -> Trainer<f64> {
        Trainer::new(
            toy_gen_spec(),
            toy_disc_spec(),
            FeatureExtractor::reduced(99),
            toy_cfg(seed),
        )
        .unwrap()
    }

    #[test]
    fn schedule_matches_published_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 2e-3);
        assert_eq!(lr_schedule(39, &cfg).unwrap(), 2e-3);
        assert_eq!(lr_schedule(40, &cfg).unwrap(), 2e-3);
        assert_eq!(lr_schedule(45, &cfg).unwrap(), 1e-3);
        assert_eq!(lr_schedule(50, &cfg).unwrap(), 0.0);
        assert!(lr_schedule(51, &cfg).is_err());
    }

    #[test]
    fn schedule_handles_empty_decay_window() {
        let cfg = TrainConfig {
            epochs: 10,
            decay_start: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(9, &cfg).unwrap(), 2e-3);
        assert_eq!(lr_schedule(10, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.decay_start = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.d_steps_per_g = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut params = Params::<f64>::new();
        params.insert1("w", arr1(&[1.0]));
        let mut grads = Grads::new();
        grads.insert1("w", arr1(&[1.0]));
        let mut opt = Adam::new(0.5, 0.999);
        opt.step(&mut params, &grads, 0.1);
        let w = params.get1("w")[0];
        assert_abs_diff_eq!(w, 0.9, epsilon = 1e-8);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = Params::<f64>::new();
        params.insert1("w", arr1(&[1.25, -0.5]));
        let mut grads = Grads::new();
        grads.insert1("w", arr1(&[0.0, 0.0]));
        let mut opt = Adam::new(0.5, 0.999);
        opt.step(&mut params, &grads, 0.1);
        opt.step(&mut params, &grads, 0.1);
        assert_eq!(params.get1("w")[0], 1.25);
        assert_eq!(params.get1("w")[1], -0.5);
    }

    #[test]
    fn adam_descends_monotonically_under_constant_gradient() {
        let mut params = Params::<f64>::new();
        params.insert1("w", arr1(&[0.0]));
        let mut grads = Grads::new();
        grads.insert1("w", arr1(&[1.0]));
        let mut opt = Adam::new(0.5, 0.999);
        let mut prev = 0.0;
        for _ in 0..5 {
            opt.step(&mut params, &grads, 0.05);
            let w = params.get1("w")[0];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn fixed_seed_reproduces_loss_logs_bitwise() {
        let data = toy_data(4, 7);
        let mut t1 = toy_trainer(5);
        let r1 = t1.fit(&data, None, None).unwrap();
        let mut t2 = toy_trainer(5);
        let r2 = t2.fit(&data, None, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            t1.nets.g_b2s.params.content_hash(),
            t2.nets.g_b2s.params.content_hash()
        );
        let mut t3 = toy_trainer(6);
        let r3 = t3.fit(&data, None, None).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn four_pairs_batch_two_gives_two_steps_per_epoch() {
        let data = toy_data(4, 7);
        let mut t = toy_trainer(1);
        let reports = t.fit(&data, None, None).unwrap();
        assert_eq!(reports.len(), 2 * 2);
        for (i, r) in reports.iter().enumerate() {
            assert_eq!(r.step, i as u64 + 1);
            assert_eq!(r.d_steps, 2);
            assert!(r.identity_gap(t.cfg.loss.alpha) < 1e-6);
        }
        assert_eq!(t.d_step_count, t.step * 2);
    }

    #[test]
    fn extractor_stays_frozen_through_fit() {
        let data = toy_data(4, 8);
        let mut t = toy_trainer(2);
        let before = t.extractor.params_hash();
        t.fit(&data, None, None).unwrap();
        assert_eq!(t.extractor.params_hash(), before);
    }

    #[test]
    fn zero_alpha_and_constant_discriminators_freeze_generators() {
        let data = toy_data(4, 9);
        let mut t = toy_trainer(3);
        t.cfg.loss.alpha = 0.0;
        for name in t.nets.d_a.params.names().map(str::to_owned).collect::<Vec<_>>() {
            t.nets.d_a.params.get_mut(&name).fill(0.0);
        }
        for name in t.nets.d_b.params.names().map(str::to_owned).collect::<Vec<_>>() {
            t.nets.d_b.params.get_mut(&name).fill(0.0);
        }
        let g1_before = t.nets.g_b2s.params.content_hash();
        let g2_before = t.nets.g_s2b.params.content_hash();
        let mut d_rng = ChaCha8Rng::seed_from_u64(0);
        t.train_step(&data, &[0, 1], &mut d_rng, 0).unwrap();
        assert_eq!(t.nets.g_b2s.params.content_hash(), g1_before);
        assert_eq!(t.nets.g_s2b.params.content_hash(), g2_before);
    }

    #[test]
    fn non_finite_parameters_abort_with_term_name() {
        let data = toy_data(2, 10);
        let mut t = toy_trainer(4);
        t.nets.g_b2s.params.get_mut("enc.0.weight").fill(f64::NAN);
        let mut d_rng = ChaCha8Rng::seed_from_u64(0);
        let err = t.train_step(&data, &[0, 1], &mut d_rng, 0).unwrap_err();
        match err {
            TrainError::NonFinite { term, .. } => {
                assert!(!term.is_empty());
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = MemoryPairs::<f64>(Vec::new());
        let mut t = toy_trainer(4);
        assert!(matches!(
            t.fit(&data, None, None),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn zero_epochs_writes_the_initial_state_as_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(4, 11);
        let mut t = toy_trainer(5);
        t.cfg.epochs = 0;
        t.cfg.decay_start = 0;
        let before = t.nets.g_b2s.params.content_hash();
        let reports = t.fit(&data, Some(dir.path()), None).unwrap();
        assert!(reports.is_empty());
        assert_eq!(t.nets.g_b2s.params.content_hash(), before);
        let loaded =
            Trainer::<f64>::load_checkpoint(&dir.path().join("checkpoint-final.cdts"), FeatureExtractor::reduced(99))
                .unwrap();
        assert_eq!(loaded.nets.g_b2s.params.content_hash(), before);
        assert_eq!(loaded.epoch, 0);
    }

    #[test]
    fn generator_loaded_alone_matches_the_full_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(4, 13);
        let mut t = toy_trainer(21);
        t.cfg.epochs = 1;
        t.fit(&data, None, None).unwrap();
        let path = dir.path().join("g.cdts");
        t.save_checkpoint(&path).unwrap();

        let g = Trainer::<f64>::load_generator_b2s(&path).unwrap();
        assert_eq!(g.params.content_hash(), t.nets.g_b2s.params.content_hash());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array::from_shape_fn((1, 3, 16, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        assert_eq!(g.forward(&x).unwrap(), t.nets.g_b2s.forward(&x).unwrap());
    }

    #[test]
    fn checkpoint_resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(4, 12);

        let mut full = toy_trainer(8);
        let full_reports = full.fit(&data, None, None).unwrap();

        let mut first = toy_trainer(8);
        first.cfg.epochs = 1;
        first.cfg.checkpoint_every = 0;
        let mut first_reports = first.fit(&data, Some(dir.path()), None).unwrap();

        let mut resumed = Trainer::<f64>::load_checkpoint(
            &dir.path().join("checkpoint-final.cdts"),
            FeatureExtractor::reduced(99),
        )
        .unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.cfg.epochs = 2;
        let rest = resumed.fit(&data, None, None).unwrap();
        first_reports.extend(rest);

        assert_eq!(full_reports.len(), first_reports.len());
        for (a, b) in full_reports.iter().zip(first_reports.iter()) {
            assert_eq!(
                serde_json::to_string(a).unwrap(),
                serde_json::to_string(b).unwrap()
            );
        }
        assert_eq!(
            full.nets.g_b2s.params.content_hash(),
            resumed.nets.g_b2s.params.content_hash()
        );
        assert_eq!(
            full.nets.d_b.params.content_hash(),
            resumed.nets.d_b.params.content_hash()
        );
        assert_eq!(full.opt_g_b2s.t, resumed.opt_g_b2s.t);
    }

    #[test]
    fn reconstruction_and_both_cycle_modes_run() {
        let data = toy_data(4, 13);
        for mode in [CycleMode::Reconstruction, CycleMode::Both] {
            let mut t = toy_trainer(9);
            t.cfg.loss.cycle_mode = mode;
            let mut d_rng = ChaCha8Rng::seed_from_u64(1);
            let report = t.train_step(&data, &[0, 1], &mut d_rng, 0).unwrap();
            assert!(report.total.is_finite());
            assert!(report.cycle1 >= 0.0 && report.cycle2 >= 0.0);
        }
    }
}
