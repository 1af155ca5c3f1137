//! Generator and discriminator architectures.
//!
//! Two generator topologies share one parameter/naming scheme: an 8-stage
//! encoder-decoder with skip concatenation ("unet") and a residual-block
//! translator with two downsampling and two upsampling stages ("resblock").
//! The discriminator is a patch classifier emitting a raw score grid whose
//! receptive field is determined by its stride stack (70 pixels for the
//! default three stride-2 stages).
//!
//! Parameter arrays are stored under `<stage>.<index>.<weight|bias|scale|shift>`
//! in construction order, so checkpoints are portable across precisions and
//! implementations.

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn;
use crate::params::{Grads, Params};
use crate::scalar::{derive_seed, Real};

/// Weight init draws from N(0, 0.02).
pub const INIT_STD: f64 = 0.02;
/// Instance normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// Negative slope of the encoder/discriminator activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input {h}x{w} not divisible by {divisor} (pad or crop first)")]
    NotDivisible { h: usize, w: usize, divisor: usize },
    #[error("input {h}x{w} smaller than the {min}x{min} receptive field")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("expected {expected} input channels, got {got}")]
    BadChannels { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    UNet,
    ResBlock,
}

/// Shape of a generator. `depth` counts encoder stages (unet only), `blocks`
/// counts residual blocks (resblock only); `base` scales every channel width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub base: usize,
    pub depth: usize,
    pub blocks: usize,
}

impl GeneratorSpec {
    pub fn unet() -> Self {
        Self {
            kind: GeneratorKind::UNet,
            base: 64,
            depth: 8,
            blocks: 9,
        }
    }

    pub fn res_blocks() -> Self {
        Self {
            kind: GeneratorKind::ResBlock,
            base: 64,
            depth: 8,
            blocks: 9,
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self.kind {
            GeneratorKind::UNet => 1 << self.depth,
            GeneratorKind::ResBlock => 4,
        }
    }

    fn validate(&self) {
        assert!(self.base >= 1, "generator base width must be >= 1");
        match self.kind {
            GeneratorKind::UNet => {
                assert!(
                    (1..=8).contains(&self.depth),
                    "unet depth must be in 1..=8"
                )
            }
            GeneratorKind::ResBlock => {
                assert!(self.blocks >= 1, "resblock generator needs >= 1 block")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    None,
    LeakyRelu,
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
struct StageDef {
    name: String,
    transposed: bool,
    stride: usize,
    pad: usize,
    norm: bool,
    act: Act,
}

/// Activations recorded by one stage during a training forward pass.
struct StageCache<S: Real> {
    input: Array4<S>,
    conv_out: Array4<S>,
    norm: Option<nn::InstanceNormCache<S>>,
    normed: Option<Array4<S>>,
}

fn apply_act<S: Real>(act: Act, pre: &Array4<S>) -> Array4<S> {
    match act {
        Act::None => pre.clone(),
        Act::LeakyRelu => nn::leaky_relu(pre, S::of_f64(LEAKY_SLOPE)),
        Act::Relu => nn::relu(pre),
        Act::Tanh => nn::tanh(pre),
    }
}

fn act_backward<S: Real>(act: Act, pre: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    match act {
        Act::None => dy.clone(),
        Act::LeakyRelu => nn::leaky_relu_backward(pre, S::of_f64(LEAKY_SLOPE), dy),
        Act::Relu => nn::relu_backward(pre, dy),
        Act::Tanh => nn::tanh_backward(&nn::tanh(pre), dy),
    }
}

fn stage_forward<S: Real>(
    params: &Params<S>,
    def: &StageDef,
    x: Array4<S>,
    want_cache: bool,
) -> (Array4<S>, Option<StageCache<S>>) {
    let w = params.get4(&format!("{}.weight", def.name));
    let b = params.get1(&format!("{}.bias", def.name));
    let conv_out = if def.transposed {
        nn::conv_transpose2d(&x.view(), &w, Some(&b), def.stride, def.pad)
    } else {
        nn::conv2d(&x.view(), &w, Some(&b), def.stride, def.pad)
    };
    if def.norm {
        let scale = params.get1(&format!("{}.scale", def.name));
        let shift = params.get1(&format!("{}.shift", def.name));
        let (normed, nc) = nn::instance_norm(&conv_out.view(), &scale, &shift, S::of_f64(NORM_EPS));
        let out = apply_act(def.act, &normed);
        let cache = want_cache.then(|| StageCache {
            input: x,
            conv_out,
            norm: Some(nc),
            normed: Some(normed),
        });
        (out, cache)
    } else {
        let out = apply_act(def.act, &conv_out);
        let cache = want_cache.then(|| StageCache {
            input: x,
            conv_out,
            norm: None,
            normed: None,
        });
        (out, cache)
    }
}

/// Backpropagate one stage; records parameter gradients and returns the
/// gradient with respect to the stage input.
fn stage_backward<S: Real>(
    params: &Params<S>,
    def: &StageDef,
    cache: &StageCache<S>,
    dy: &Array4<S>,
    grads: &mut Grads<S>,
) -> Array4<S> {
    let pre = cache.normed.as_ref().unwrap_or(&cache.conv_out);
    let d_pre = act_backward(def.act, pre, dy);
    let d_conv = if def.norm {
        let scale = params.get1(&format!("{}.scale", def.name));
        let (dx, dscale, dshift) = nn::instance_norm_backward(
            &cache.conv_out.view(),
            &scale,
            cache.norm.as_ref().expect("norm stage cached stats"),
            &d_pre.view(),
        );
        grads.insert1(format!("{}.scale", def.name), dscale);
        grads.insert1(format!("{}.shift", def.name), dshift);
        dx
    } else {
        d_pre
    };
    let w = params.get4(&format!("{}.weight", def.name));
    let (dx, dw, db) = if def.transposed {
        nn::conv_transpose2d_backward(&cache.input.view(), &w, def.stride, def.pad, &d_conv.view())
    } else {
        nn::conv2d_backward(&cache.input.view(), &w, def.stride, def.pad, &d_conv.view())
    };
    grads.insert4(format!("{}.weight", def.name), dw);
    grads.insert1(format!("{}.bias", def.name), db);
    dx
}

/// Seeded Gaussian initializer; draws happen in parameter insertion order as
/// f64 and are cast to the working precision, so f32 and f64 builds from the
/// same seed hold the same values.
struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn conv<S: Real>(
        &mut self,
        params: &mut Params<S>,
        stage: &str,
        shape: (usize, usize, usize, usize),
        bias_len: usize,
    ) {
        let w = Array4::from_shape_fn(shape, |_| S::of_f64(self.normal.sample(&mut self.rng)));
        params.insert4(format!("{stage}.weight"), w);
        params.insert1(format!("{stage}.bias"), Array1::zeros(bias_len));
    }

    fn norm<S: Real>(&mut self, params: &mut Params<S>, stage: &str, channels: usize) {
        params.insert1(format!("{stage}.scale"), Array1::from_elem(channels, S::one()));
        params.insert1(format!("{stage}.shift"), Array1::zeros(channels));
    }
}

fn unet_enc_channels(base: usize, depth: usize) -> Vec<usize> {
    (0..depth).map(|i| base * (1usize << i).min(8)).collect()
}

/// Decoder output channels mirror the encoder; the last stage emits RGB.
fn unet_dec_out_channels(base: usize, depth: usize) -> Vec<usize> {
    let enc = unet_enc_channels(base, depth);
    (0..depth)
        .map(|j| if j + 1 == depth { 3 } else { enc[depth - 2 - j] })
        .collect()
}

/// Image-to-image generator over batches in [-1, 1], layout (n, 3, h, w).
pub struct Generator<S: Real> {
    pub spec: GeneratorSpec,
    pub params: Params<S>,
    stages: Vec<StageDef>,
}

/// Per-stage activations from `forward_train`, consumed by `backward`.
pub struct GenTape<S: Real> {
    caches: Vec<StageCache<S>>,
}

impl<S: Real> Generator<S> {
    pub fn build(spec: GeneratorSpec, seed: u64) -> Self {
        spec.validate();
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let stages = match spec.kind {
            GeneratorKind::UNet => Self::build_unet(&spec, &mut init, &mut params),
            GeneratorKind::ResBlock => Self::build_resblock(&spec, &mut init, &mut params),
        };
        Self {
            spec,
            params,
            stages,
        }
    }

    fn build_unet(spec: &GeneratorSpec, init: &mut Init, params: &mut Params<S>) -> Vec<StageDef> {
        let depth = spec.depth;
        let enc_ch = unet_enc_channels(spec.base, depth);
        let dec_out = unet_dec_out_channels(spec.base, depth);
        let mut stages = Vec::with_capacity(2 * depth);
        let mut in_ch = 3;
        for (i, &out_ch) in enc_ch.iter().enumerate() {
            let name = format!("enc.{i}");
            let norm = i > 0;
            init.conv(params, &name, (out_ch, in_ch, 4, 4), out_ch);
            if norm {
                init.norm(params, &name, out_ch);
            }
            stages.push(StageDef {
                name,
                transposed: false,
                stride: 2,
                pad: 1,
                norm,
                act: Act::LeakyRelu,
            });
            in_ch = out_ch;
        }
        for (j, &out_ch) in dec_out.iter().enumerate() {
            let name = format!("dec.{j}");
            let last = j + 1 == depth;
            let in_ch = if j == 0 {
                enc_ch[depth - 1]
            } else {
                dec_out[j - 1] + enc_ch[depth - 1 - j]
            };
            init.conv(params, &name, (in_ch, out_ch, 4, 4), out_ch);
            if !last {
                init.norm(params, &name, out_ch);
            }
            stages.push(StageDef {
                name,
                transposed: true,
                stride: 2,
                pad: 1,
                norm: !last,
                act: if last { Act::Tanh } else { Act::Relu },
            });
        }
        stages
    }

    fn build_resblock(
        spec: &GeneratorSpec,
        init: &mut Init,
        params: &mut Params<S>,
    ) -> Vec<StageDef> {
        let base = spec.base;
        let mid = base * 4;
        let mut stages = Vec::new();
        let push = |init: &mut Init,
                    params: &mut Params<S>,
                    stages: &mut Vec<StageDef>,
                        name: String,
                        transposed: bool,
                        shape: (usize, usize, usize, usize),
                        bias_len: usize,
                        stride: usize,
                        pad: usize,
                        norm: bool,
                        act: Act| {
            init.conv(params, &name, shape, bias_len);
            if norm {
                init.norm(params, &name, bias_len);
            }
            stages.push(StageDef {
                name,
                transposed,
                stride,
                pad,
                norm,
                act,
            });
        };
        push(
            init, params, &mut stages,
            "head.0".into(), false, (base, 3, 7, 7), base, 1, 3, true, Act::Relu,
        );
        push(
            init, params, &mut stages,
            "down.0".into(), false, (base * 2, base, 3, 3), base * 2, 2, 1, true, Act::Relu,
        );
        push(
            init, params, &mut stages,
            "down.1".into(), false, (mid, base * 2, 3, 3), mid, 2, 1, true, Act::Relu,
        );
        for b in 0..spec.blocks {
            push(
                init, params, &mut stages,
                format!("res{b}.0"), false, (mid, mid, 3, 3), mid, 1, 1, true, Act::Relu,
            );
            push(
                init, params, &mut stages,
                format!("res{b}.1"), false, (mid, mid, 3, 3), mid, 1, 1, true, Act::None,
            );
        }
        push(
            init, params, &mut stages,
            "up.0".into(), true, (mid, base * 2, 4, 4), base * 2, 2, 1, true, Act::Relu,
        );
        push(
            init, params, &mut stages,
            "up.1".into(), true, (base * 2, base, 4, 4), base, 2, 1, true, Act::Relu,
        );
        push(
            init, params, &mut stages,
            "tail.0".into(), false, (3, base, 7, 7), 3, 1, 3, false, Act::Tanh,
        );
        stages
    }

    fn validate_input(&self, x: &Array4<S>) -> Result<(), NetworkError> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetworkError::BadChannels {
                expected: 3,
                got: c,
            });
        }
        let divisor = self.spec.divisor();
        if h % divisor != 0 || w % divisor != 0 || h == 0 || w == 0 {
            return Err(NetworkError::NotDivisible { h, w, divisor });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<S>) -> Result<Array4<S>, NetworkError> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &Array4<S>) -> Result<(Array4<S>, GenTape<S>), NetworkError> {
        self.run(x, true)
            .map(|(y, caches)| (y, GenTape { caches: caches.expect("caches requested") }))
    }

    fn run(
        &self,
        x: &Array4<S>,
        want: bool,
    ) -> Result<(Array4<S>, Option<Vec<StageCache<S>>>), NetworkError> {
        self.validate_input(x)?;
        let mut caches: Vec<StageCache<S>> = Vec::new();
        let mut push = |c: Option<StageCache<S>>| {
            if let Some(c) = c {
                caches.push(c);
            }
        };
        let out = match self.spec.kind {
            GeneratorKind::UNet => {
                let depth = self.spec.depth;
                let mut skips: Vec<Array4<S>> = Vec::with_capacity(depth);
                let mut h = x.clone();
                for def in &self.stages[..depth] {
                    let (y, c) = stage_forward(&self.params, def, h, want);
                    push(c);
                    skips.push(y.clone());
                    h = y;
                }
                let mut d = h;
                for (j, def) in self.stages[depth..].iter().enumerate() {
                    let input = if j == 0 {
                        d
                    } else {
                        nn::concat_channels(&d, &skips[depth - 1 - j])
                    };
                    let (y, c) = stage_forward(&self.params, def, input, want);
                    push(c);
                    d = y;
                }
                d
            }
            GeneratorKind::ResBlock => {
                let blocks = self.spec.blocks;
                let mut h = x.clone();
                for def in &self.stages[..3] {
                    let (y, c) = stage_forward(&self.params, def, h, want);
                    push(c);
                    h = y;
                }
                for b in 0..blocks {
                    let (t, c0) = stage_forward(&self.params, &self.stages[3 + 2 * b], h.clone(), want);
                    push(c0);
                    let (t, c1) = stage_forward(&self.params, &self.stages[3 + 2 * b + 1], t, want);
                    push(c1);
                    h = h + &t;
                }
                for def in &self.stages[3 + 2 * blocks..] {
                    let (y, c) = stage_forward(&self.params, def, h, want);
                    push(c);
                    h = y;
                }
                h
            }
        };
        Ok((out, want.then_some(caches)))
    }

    /// Gradients of a scalar loss with respect to all parameters and the
    /// input, given the loss gradient at the output.
    pub fn backward(&self, tape: &GenTape<S>, d_out: &Array4<S>) -> (Grads<S>, Array4<S>) {
        let mut grads = Grads::new();
        let dx = match self.spec.kind {
            GeneratorKind::UNet => self.backward_unet(tape, d_out, &mut grads),
            GeneratorKind::ResBlock => self.backward_resblock(tape, d_out, &mut grads),
        };
        (grads, dx)
    }

    fn backward_unet(
        &self,
        tape: &GenTape<S>,
        d_out: &Array4<S>,
        grads: &mut Grads<S>,
    ) -> Array4<S> {
        let depth = self.spec.depth;
        let dec_out = unet_dec_out_channels(self.spec.base, depth);
        let mut d_skip: Vec<Option<Array4<S>>> = (0..depth).map(|_| None).collect();
        let mut g = d_out.clone();
        for j in (0..depth).rev() {
            let def = &self.stages[depth + j];
            let cache = &tape.caches[depth + j];
            let d_in = stage_backward(&self.params, def, cache, &g, grads);
            if j == 0 {
                g = d_in;
            } else {
                let (d_up, d_sk) = nn::split_channels(&d_in, dec_out[j - 1]);
                d_skip[depth - 1 - j] = Some(d_sk);
                g = d_up;
            }
        }
        for i in (0..depth).rev() {
            if let Some(ds) = d_skip[i].take() {
                g = g + &ds;
            }
            let def = &self.stages[i];
            let cache = &tape.caches[i];
            g = stage_backward(&self.params, def, cache, &g, grads);
        }
        g
    }

    fn backward_resblock(
        &self,
        tape: &GenTape<S>,
        d_out: &Array4<S>,
        grads: &mut Grads<S>,
    ) -> Array4<S> {
        let blocks = self.spec.blocks;
        let tail_start = 3 + 2 * blocks;
        let mut g = d_out.clone();
        for idx in (tail_start..self.stages.len()).rev() {
            g = stage_backward(&self.params, &self.stages[idx], &tape.caches[idx], &g, grads);
        }
        for b in (0..blocks).rev() {
            let i1 = 3 + 2 * b + 1;
            let i0 = 3 + 2 * b;
            let d_block = stage_backward(&self.params, &self.stages[i1], &tape.caches[i1], &g, grads);
            let d_block = stage_backward(&self.params, &self.stages[i0], &tape.caches[i0], &d_block, grads);
            g = g + &d_block;
        }
        for idx in (0..3).rev() {
            g = stage_backward(&self.params, &self.stages[idx], &tape.caches[idx], &g, grads);
        }
        g
    }
}

/// Patch discriminator shape: `base` scales channel widths, `n_down` counts
/// stride-2 stages (3 gives the 70-pixel receptive field).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub base: usize,
    pub n_down: usize,
}

impl Default for DiscSpec {
    fn default() -> Self {
        Self { base: 64, n_down: 3 }
    }
}

impl DiscSpec {
    fn validate(&self) {
        assert!(self.base >= 1, "discriminator base width must be >= 1");
        assert!(self.n_down >= 1, "discriminator needs >= 1 stride-2 stage");
    }
}

/// Patch classifier over batches in [-1, 1]; emits an unsquashed score grid.
pub struct Discriminator<S: Real> {
    pub spec: DiscSpec,
    pub params: Params<S>,
    stages: Vec<StageDef>,
}

pub struct DiscTape<S: Real> {
    caches: Vec<StageCache<S>>,
}

impl<S: Real> Discriminator<S> {
    pub fn build(spec: DiscSpec, seed: u64) -> Self {
        spec.validate();
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let mut stages = Vec::new();
        let width = |i: usize| spec.base * (1usize << i).min(8);
        let mut in_ch = 3;
        for i in 0..=spec.n_down {
            let name = format!("body.{i}");
            let out_ch = width(i);
            let stride = if i < spec.n_down { 2 } else { 1 };
            let norm = i > 0;
            init.conv(&mut params, &name, (out_ch, in_ch, 4, 4), out_ch);
            if norm {
                init.norm(&mut params, &name, out_ch);
            }
            stages.push(StageDef {
                name,
                transposed: false,
                stride,
                pad: 1,
                norm,
                act: Act::LeakyRelu,
            });
            in_ch = out_ch;
        }
        let name = format!("body.{}", spec.n_down + 1);
        init.conv(&mut params, &name, (1, in_ch, 4, 4), 1);
        stages.push(StageDef {
            name,
            transposed: false,
            stride: 1,
            pad: 1,
            norm: false,
            act: Act::None,
        });
        Self {
            spec,
            params,
            stages,
        }
    }

    /// Input-pixel extent seen by one output score, via the standard
    /// recurrence rf = stride * (rf - 1) + window over the stack in reverse.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        for def in self.stages.iter().rev() {
            rf = def.stride * (rf - 1) + 4;
        }
        rf
    }

    fn validate_input(&self, x: &Array4<S>) -> Result<(), NetworkError> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetworkError::BadChannels {
                expected: 3,
                got: c,
            });
        }
        let min = self.receptive_field();
        if h < min || w < min {
            return Err(NetworkError::TooSmall { h, w, min });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<S>) -> Result<Array4<S>, NetworkError> {
        self.validate_input(x)?;
        let mut h = x.clone();
        for def in &self.stages {
            let (y, _) = stage_forward(&self.params, def, h, false);
            h = y;
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: &Array4<S>) -> Result<(Array4<S>, DiscTape<S>), NetworkError> {
        self.validate_input(x)?;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for def in &self.stages {
            let (y, c) = stage_forward(&self.params, def, h, true);
            caches.push(c.expect("cache requested"));
            h = y;
        }
        Ok((h, DiscTape { caches }))
    }

    pub fn backward(&self, tape: &DiscTape<S>, d_out: &Array4<S>) -> (Grads<S>, Array4<S>) {
        let mut grads = Grads::new();
        let mut g = d_out.clone();
        for (def, cache) in self.stages.iter().zip(tape.caches.iter()).rev() {
            g = stage_backward(&self.params, def, cache, &g, &mut grads);
        }
        (grads, g)
    }
}

/// Reflect-pad the bottom/right spatial edges up to the next multiple of
/// `divisor`, returning the padded tensor and the original extent so the
/// output can be cropped back.
pub fn reflect_pad_to_multiple<S: Real>(
    x: &Array4<S>,
    divisor: usize,
) -> (Array4<S>, (usize, usize)) {
    let (n, c, h, w) = x.dim();
    let target = |d: usize| d.div_ceil(divisor) * divisor;
    let (th, tw) = (target(h), target(w));
    if (th, tw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let out = Array4::from_shape_fn((n, c, th, tw), |(b, ch, y, xx)| {
        let sy = crate::blur::mirror_index(y as i64, h);
        let sx = crate::blur::mirror_index(xx as i64, w);
        x[[b, ch, sy, sx]]
    });
    (out, (h, w))
}

/// Per-network init seeds derived from one master seed, so each of the four
/// networks gets an independent weight stream.
#[derive(Clone, Copy, Debug)]
pub struct CycleGanSeeds {
    pub g_b2s: u64,
    pub g_s2b: u64,
    pub d_a: u64,
    pub d_b: u64,
}

impl CycleGanSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            g_b2s: derive_seed(seed, &[0x10]),
            g_s2b: derive_seed(seed, &[0x11]),
            d_a: derive_seed(seed, &[0x12]),
            d_b: derive_seed(seed, &[0x13]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};

    fn small_unet() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::UNet,
            base: 2,
            depth: 3,
            blocks: 9,
        }
    }

    fn small_res() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::ResBlock,
            base: 2,
            depth: 8,
            blocks: 2,
        }
    }

    fn rand_batch(seed: u64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(dim, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn unet_preserves_shape_and_range() {
        let g = Generator::<f64>::build(small_unet(), 7);
        let x = rand_batch(0, (2, 3, 16, 16));
        let y = g.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 3, 16, 16));
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        let y2 = g.forward(&x).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn resblock_preserves_shape_and_range() {
        let g = Generator::<f64>::build(small_res(), 7);
        let x = rand_batch(1, (2, 3, 16, 16));
        let y = g.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 3, 16, 16));
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn divisibility_is_enforced_with_divisor_in_message() {
        let g = Generator::<f64>::build(small_unet(), 7);
        let x = rand_batch(2, (1, 3, 12, 12));
        let err = g.forward(&x).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
        let g = Generator::<f64>::build(small_res(), 7);
        let x = rand_batch(2, (1, 3, 10, 10));
        let err = g.forward(&x).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn default_unet_name_set_matches_documented_layout() {
        let g = Generator::<f32>::build(GeneratorSpec::unet(), 0);
        let mut expected: Vec<String> = Vec::new();
        for i in 0..8 {
            expected.push(format!("enc.{i}.weight"));
            expected.push(format!("enc.{i}.bias"));
            if i > 0 {
                expected.push(format!("enc.{i}.scale"));
                expected.push(format!("enc.{i}.shift"));
            }
        }
        for j in 0..8 {
            expected.push(format!("dec.{j}.weight"));
            expected.push(format!("dec.{j}.bias"));
            if j < 7 {
                expected.push(format!("dec.{j}.scale"));
                expected.push(format!("dec.{j}.shift"));
            }
        }
        let actual: Vec<String> = g.params.names().map(str::to_owned).collect();
        assert_eq!(actual, expected);

        assert_eq!(g.params.get("enc.0.weight").shape(), &[64, 3, 4, 4]);
        assert_eq!(g.params.get("enc.3.weight").shape(), &[512, 256, 4, 4]);
        assert_eq!(g.params.get("enc.7.weight").shape(), &[512, 512, 4, 4]);
        assert_eq!(g.params.get("dec.0.weight").shape(), &[512, 512, 4, 4]);
        assert_eq!(g.params.get("dec.1.weight").shape(), &[1024, 512, 4, 4]);
        assert_eq!(g.params.get("dec.4.weight").shape(), &[1024, 256, 4, 4]);
        assert_eq!(g.params.get("dec.7.weight").shape(), &[128, 3, 4, 4]);
    }

    #[test]
    fn resblock_has_nine_paired_conv_groups_by_default() {
        let g = Generator::<f32>::build(GeneratorSpec::res_blocks(), 0);
        let blocks: std::collections::BTreeSet<String> = g
            .params
            .names()
            .filter(|n| n.starts_with("res"))
            .map(|n| n.split('.').next().unwrap().to_owned())
            .collect();
        assert_eq!(blocks.len(), 9);
        for b in &blocks {
            assert_eq!(g.params.get(&format!("{b}.0.weight")).shape(), &[256, 256, 3, 3]);
            assert_eq!(g.params.get(&format!("{b}.1.weight")).shape(), &[256, 256, 3, 3]);
        }
        assert_eq!(g.params.get("head.0.weight").shape(), &[64, 3, 7, 7]);
        assert_eq!(g.params.get("up.0.weight").shape(), &[256, 128, 4, 4]);
        assert_eq!(g.params.get("tail.0.weight").shape(), &[3, 64, 7, 7]);
    }

    #[test]
    fn same_seed_reproduces_parameters_across_precisions() {
        let a = Generator::<f64>::build(small_unet(), 11);
        let b = Generator::<f64>::build(small_unet(), 11);
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        let c = Generator::<f64>::build(small_unet(), 12);
        assert_ne!(a.params.content_hash(), c.params.content_hash());

        let f = Generator::<f32>::build(small_unet(), 11);
        for (name, arr) in f.params.iter() {
            let wide = a.params.get(name);
            for (x, y) in arr.iter().zip(wide.iter()) {
                assert_eq!(*x, *y as f32, "{name} casts from the same f64 draw");
            }
        }
    }

    #[test]
    fn skip_connections_carry_encoder_features() {
        let mut g = Generator::<f64>::build(small_unet(), 3);
        let depth = 3;
        let dec_out = unet_dec_out_channels(2, depth);
        g.params.get_mut("dec.0.weight").fill(0.0);
        for j in 1..depth {
            let up = dec_out[j - 1];
            let w = g.params.get_mut(&format!("dec.{j}.weight"));
            let mut w4 = w.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            w4.slice_mut(ndarray::s![..up, .., .., ..]).fill(0.0);
        }
        let x1 = rand_batch(5, (1, 3, 16, 16));
        let x2 = rand_batch(6, (1, 3, 16, 16));
        let y1 = g.forward(&x1).unwrap();
        let y2 = g.forward(&x2).unwrap();
        let max_diff = y1
            .iter()
            .zip(y2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "skips should still carry input information");
    }

    #[test]
    fn discriminator_grid_and_receptive_field() {
        let d = Discriminator::<f32>::build(DiscSpec { base: 8, n_down: 3 }, 0);
        assert_eq!(d.receptive_field(), 70);
        let x = rand_batch(3, (2, 3, 256, 256)).mapv(|v| v as f32);
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 1, 30, 30));

        let tiny = Discriminator::<f32>::build(DiscSpec { base: 4, n_down: 1 }, 0);
        assert_eq!(tiny.receptive_field(), 16);
        let small = Discriminator::<f32>::build(DiscSpec { base: 4, n_down: 2 }, 0);
        assert_eq!(small.receptive_field(), 34);
    }

    #[test]
    fn discriminator_rejects_inputs_below_receptive_field() {
        let d = Discriminator::<f64>::build(DiscSpec::default(), 0);
        let x = rand_batch(4, (1, 3, 64, 64));
        let err = d.forward(&x).unwrap_err();
        assert!(err.to_string().contains("70"), "{err}");
    }

    #[test]
    fn discriminator_scores_shift_with_the_input() {
        // A textured patch on a constant background, moved by one output
        // stride. Keeping the borders constant means every plane sees the
        // same value multiset in both runs, so the normalization statistics
        // match and interior scores must translate exactly.
        let d = Discriminator::<f64>::build(DiscSpec { base: 2, n_down: 2 }, 9);
        let total_stride = 4;
        let tex = rand_batch(8, (1, 3, 48, 48));
        let place = |row0: usize| {
            let mut x = Array4::from_elem((1, 3, 128, 128), 0.1);
            for c in 0..3 {
                for y in 0..48 {
                    for xx in 0..48 {
                        x[[0, c, row0 + y, 40 + xx]] = tex[[0, c, y, xx]];
                    }
                }
            }
            x
        };
        let m1 = d.forward(&place(40)).unwrap();
        let m2 = d.forward(&place(40 + total_stride)).unwrap();
        let margin = 9;
        let (_, _, mh, mw) = m1.dim();
        for y in margin..mh - margin {
            for xx in margin..mw - margin {
                let a = m2[[0, 0, y, xx]];
                let b = m1[[0, 0, y - 1, xx]];
                assert!(
                    (a - b).abs() < 1e-5,
                    "cell ({y},{xx}): shifted {a} vs original {b}"
                );
            }
        }
    }

    #[test]
    fn reflect_padding_reaches_the_next_multiple_and_mirrors_edges() {
        let x = rand_batch(3, (1, 3, 10, 13));
        let (padded, orig) = reflect_pad_to_multiple(&x, 8);
        assert_eq!(orig, (10, 13));
        assert_eq!(padded.dim(), (1, 3, 16, 16));
        for ((b, c, y, xx), v) in x.indexed_iter() {
            assert_eq!(padded[[b, c, y, xx]], *v);
        }
        assert_eq!(padded[[0, 0, 10, 0]], x[[0, 0, 8, 0]]);
        assert_eq!(padded[[0, 0, 0, 13]], x[[0, 0, 0, 11]]);
        let (same, _) = reflect_pad_to_multiple(&x, 1);
        assert_eq!(same, x);
    }

    /// Finite-difference spot check of full-network parameter and input
    /// gradients under a scalar probe loss.
    fn gradcheck_generator(spec: GeneratorSpec, seed: u64) {
        let g = Generator::<f64>::build(spec, seed);
        let x = rand_batch(seed + 100, (1, 3, 16, 16));
        let probe = rand_batch(seed + 200, (1, 3, 16, 16));
        let loss = |gen: &Generator<f64>, x_: &Array4<f64>| -> f64 {
            let y = gen.forward(x_).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
        };
        let (y, tape) = g.forward_train(&x).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let (grads, dx) = g.backward(&tape, &probe);

        let h = 1e-5;
        let mut checked = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let names: Vec<String> = grads.names().map(str::to_owned).collect();
        for name in names.iter().step_by(names.len() / 6 + 1) {
            let n = g.params.get(name).len();
            let flat = rng.gen_range(0..n);
            let analytic = grads.get(name).as_slice().unwrap()[flat];
            let mut gp = Generator::<f64>::build(spec, seed);
            gp.params.get_mut(name).as_slice_mut().unwrap()[flat] += h;
            let mut gm = Generator::<f64>::build(spec, seed);
            gm.params.get_mut(name).as_slice_mut().unwrap()[flat] -= h;
            let numeric = (loss(&gp, &x) - loss(&gm, &x)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "{name}[{flat}]: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 5);
        for _ in 0..4 {
            let idx = [
                0,
                rng.gen_range(0..3),
                rng.gen_range(0..16),
                rng.gen_range(0..16),
            ];
            let analytic = dx[idx];
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let numeric = (loss(&g, &xp) - loss(&g, &xm)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "input{idx:?}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        gradcheck_generator(small_unet(), 21);
    }

    #[test]
    fn resblock_gradients_match_finite_differences() {
        gradcheck_generator(small_res(), 22);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let spec = DiscSpec { base: 4, n_down: 1 };
        let d = Discriminator::<f64>::build(spec, 31);
        let x = rand_batch(40, (1, 3, 16, 16));
        let (scores, tape) = d.forward_train(&x).unwrap();
        let probe = rand_batch(41, (1, 1, scores.dim().2, scores.dim().3));
        let (grads, dx) = d.backward(&tape, &probe);
        let loss = |disc: &Discriminator<f64>, x_: &Array4<f64>| -> f64 {
            let y = disc.forward(x_).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for name in ["body.0.weight", "body.1.scale", "body.2.weight", "body.1.bias"] {
            let n = d.params.get(name).len();
            let flat = rng.gen_range(0..n);
            let analytic = grads.get(name).as_slice().unwrap()[flat];
            let mut dp = Discriminator::<f64>::build(spec, 31);
            dp.params.get_mut(name).as_slice_mut().unwrap()[flat] += h;
            let mut dm = Discriminator::<f64>::build(spec, 31);
            dm.params.get_mut(name).as_slice_mut().unwrap()[flat] -= h;
            let numeric = (loss(&dp, &x) - loss(&dm, &x)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "{name}[{flat}]: analytic {analytic} vs numeric {numeric}"
            );
        }
        let idx = [0, 1, 8, 8];
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let numeric = (loss(&d, &xp) - loss(&d, &xm)) / (2.0 * h);
        let analytic = dx[idx];
        let denom: f64 = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(((analytic - numeric) / denom).abs() < 1e-4);
    }

    #[test]
    fn batch_dimension_passes_through() {
        let d = Discriminator::<f64>::build(DiscSpec { base: 2, n_down: 1 }, 0);
        let x = rand_batch(50, (2, 3, 32, 32));
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dim().0, 2);
        assert_eq!(y.dim().1, 1);
    }
}
