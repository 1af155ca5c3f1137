//! Fixed feature extractors for the perceptual cycle distance.
//!
//! Two interchangeable topologies: the 19-layer VGG stack truncated at a
//! configurable tap, fed from an external weight file, and a small seeded
//! three-stage stack that keeps the full test suite self-contained. Both are
//! frozen: gradients flow through them to their input, never into their
//! parameters.

use std::path::Path;

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn;
use crate::params::Params;
use crate::scalar::Real;
use crate::store::{self, StoreError};

/// Mean RGB intensities subtracted before the first VGG layer, on the
/// 0..255 scale.
pub const VGG_MEANS: [f64; 3] = [123.68, 116.779, 103.939];

/// Convolutions per VGG block; a 2x2 max pool follows each block.
const VGG_BLOCK_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
const VGG_BLOCK_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

const REDUCED_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Error)]
pub enum PerceptualError {
    #[error("weight file: {0}")]
    Store(#[from] StoreError),
    #[error("tap ({block},{conv}) outside the 5-block topology")]
    BadTap { block: usize, conv: usize },
    #[error("weight file missing array {0}")]
    MissingArray(String),
    #[error("array {name} has shape {got:?}, expected {expected:?}")]
    BadArrayShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("input {h}x{w} below extractor minimum {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("expected 3 input channels, got {0}")]
    BadChannels(usize),
    #[error("feature shapes {a:?} and {b:?} differ")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    Vgg19,
    Reduced,
}

/// Tap position: features are taken after the ReLU of conv `conv` (1-based)
/// inside pool block `block` (1-based), before that block's pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub block: usize,
    pub conv: usize,
}

impl Tap {
    pub const DEFAULT: Tap = Tap { block: 3, conv: 3 };

    fn validate(self) -> Result<(), PerceptualError> {
        if self.block == 0
            || self.block > VGG_BLOCK_CONVS.len()
            || self.conv == 0
            || self.conv > VGG_BLOCK_CONVS[self.block - 1]
        {
            return Err(PerceptualError::BadTap {
                block: self.block,
                conv: self.conv,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum LayerOp {
    /// 3x3 pad-1 conv followed by ReLU; the string keys the parameter arrays.
    ConvRelu(String),
    Pool,
}

enum OpCache<S: Real> {
    ConvRelu { conv_out: Array4<S> },
    Pool {
        arg: Array4<u8>,
        input_dim: (usize, usize, usize, usize),
    },
}

/// Activations recorded by `forward_train`, consumed by `backward_data`.
pub struct FeatTape<S: Real> {
    ops: Vec<OpCache<S>>,
}

pub struct FeatureExtractor<S: Real> {
    pub mode: ExtractorMode,
    pub tap: Tap,
    params: Params<S>,
    ops: Vec<LayerOp>,
    min_input: usize,
    /// Input gradient picks up this factor from the preprocessing map.
    input_scale: S,
}

impl<S: Real> FeatureExtractor<S> {
    /// Small frozen stack: three conv(3x3)+ReLU+pool stages with channels
    /// 8, 16, 32 and weights drawn once from a seeded Gaussian with
    /// std 1/sqrt(fan_in).
    pub fn reduced(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut ops = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in REDUCED_CHANNELS.iter().enumerate() {
            let name = format!("stage.{i}");
            let std = 1.0 / ((in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let w = Array4::from_shape_fn((out_ch, in_ch, 3, 3), |_| {
                S::of_f64(normal.sample(&mut rng))
            });
            params.insert4(format!("{name}.weight"), w);
            params.insert1(format!("{name}.bias"), Array1::zeros(out_ch));
            ops.push(LayerOp::ConvRelu(name));
            ops.push(LayerOp::Pool);
            in_ch = out_ch;
        }
        Self {
            mode: ExtractorMode::Reduced,
            tap: Tap { block: 3, conv: 1 },
            params,
            ops,
            min_input: 8,
            input_scale: S::one(),
        }
    }

    /// VGG-19 stack truncated at `tap`, loaded from a tensor container whose
    /// arrays are named `conv<block>.<index>.<weight|bias>` (index 0-based
    /// within the block). Only the layers up to the tap are read.
    pub fn vgg19(path: &Path, tap: Tap) -> Result<Self, PerceptualError> {
        tap.validate()?;
        let (_, arrays) = store::read_tensors::<S>(path)?;
        let mut params = Params::new();
        let mut ops = Vec::new();
        let mut in_ch = 3;
        for block in 1..=tap.block {
            let convs = if block == tap.block {
                tap.conv
            } else {
                VGG_BLOCK_CONVS[block - 1]
            };
            let out_ch = VGG_BLOCK_CHANNELS[block - 1];
            for idx in 0..convs {
                let name = format!("conv{block}.{idx}");
                let expected_w = vec![out_ch, in_ch, 3, 3];
                let w = arrays
                    .get(&format!("{name}.weight"))
                    .ok_or_else(|| PerceptualError::MissingArray(format!("{name}.weight")))?;
                if w.shape() != expected_w.as_slice() {
                    return Err(PerceptualError::BadArrayShape {
                        name: format!("{name}.weight"),
                        got: w.shape().to_vec(),
                        expected: expected_w,
                    });
                }
                let b = arrays
                    .get(&format!("{name}.bias"))
                    .ok_or_else(|| PerceptualError::MissingArray(format!("{name}.bias")))?;
                if b.shape() != [out_ch] {
                    return Err(PerceptualError::BadArrayShape {
                        name: format!("{name}.bias"),
                        got: b.shape().to_vec(),
                        expected: vec![out_ch],
                    });
                }
                params.insert(format!("{name}.weight"), w.clone());
                params.insert(format!("{name}.bias"), b.clone());
                ops.push(LayerOp::ConvRelu(name));
                in_ch = out_ch;
            }
            if block < tap.block {
                ops.push(LayerOp::Pool);
            }
        }
        Ok(Self {
            mode: ExtractorMode::Vgg19,
            tap,
            params,
            ops,
            min_input: 4 << (tap.block - 1),
            input_scale: S::of_f64(127.5),
        })
    }

    /// Smallest accepted spatial extent.
    pub fn min_input(&self) -> usize {
        self.min_input
    }

    /// Digest of the frozen parameters; stable across a training run.
    pub fn params_hash(&self) -> [u8; 32] {
        self.params.content_hash()
    }

    fn preprocess(&self, x: &Array4<S>) -> Array4<S> {
        match self.mode {
            ExtractorMode::Reduced => x.clone(),
            ExtractorMode::Vgg19 => {
                let mut y = x.mapv(|v| (v + S::one()) * S::of_f64(127.5));
                for (c, &m) in VGG_MEANS.iter().enumerate() {
                    y.slice_mut(ndarray::s![.., c, .., ..])
                        .mapv_inplace(|v| v - S::of_f64(m));
                }
                y
            }
        }
    }

    fn validate_input(&self, x: &Array4<S>) -> Result<(), PerceptualError> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(PerceptualError::BadChannels(c));
        }
        if h < self.min_input || w < self.min_input {
            return Err(PerceptualError::TooSmall {
                h,
                w,
                min: self.min_input,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<S>) -> Result<Array4<S>, PerceptualError> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &Array4<S>) -> Result<(Array4<S>, FeatTape<S>), PerceptualError> {
        self.run(x, true)
            .map(|(y, t)| (y, FeatTape { ops: t.expect("tape requested") }))
    }

    fn run(
        &self,
        x: &Array4<S>,
        want: bool,
    ) -> Result<(Array4<S>, Option<Vec<OpCache<S>>>), PerceptualError> {
        self.validate_input(x)?;
        let mut h = self.preprocess(x);
        let mut tape = Vec::new();
        for op in &self.ops {
            match op {
                LayerOp::ConvRelu(name) => {
                    let w = self.params.get4(&format!("{name}.weight"));
                    let b = self.params.get1(&format!("{name}.bias"));
                    let conv_out = nn::conv2d(&h.view(), &w, Some(&b), 1, 1);
                    h = nn::relu(&conv_out);
                    if want {
                        tape.push(OpCache::ConvRelu { conv_out });
                    }
                }
                LayerOp::Pool => {
                    let input_dim = h.dim();
                    let (pooled, arg) = nn::maxpool2(&h);
                    h = pooled;
                    if want {
                        tape.push(OpCache::Pool { arg, input_dim });
                    }
                }
            }
        }
        Ok((h, want.then_some(tape)))
    }

    /// Gradient of a scalar loss with respect to the extractor input, given
    /// the loss gradient at the feature map. Parameters receive nothing.
    pub fn backward_data(&self, tape: &FeatTape<S>, d_feat: &Array4<S>) -> Array4<S> {
        let mut g = d_feat.clone();
        for (op, cache) in self.ops.iter().zip(tape.ops.iter()).rev() {
            match (op, cache) {
                (LayerOp::ConvRelu(name), OpCache::ConvRelu { conv_out }) => {
                    let d_pre = nn::relu_backward(conv_out, &g);
                    let w = self.params.get4(&format!("{name}.weight"));
                    let (_, _, ih, iw) = conv_out.dim();
                    g = nn::conv2d_backward_data(&w, 1, 1, &d_pre.view(), (ih, iw));
                }
                (LayerOp::Pool, OpCache::Pool { arg, input_dim }) => {
                    g = nn::maxpool2_backward(arg, &g, *input_dim);
                }
                _ => unreachable!("tape misaligned with op list"),
            }
        }
        g.mapv_inplace(|v| v * self.input_scale);
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureDist {
    L1,
    L2,
}

/// Mean elementwise distance between two equally shaped feature maps:
/// squared differences for L2, absolute for L1, averaged over every element
/// including channels.
pub fn perceptual_distance<S: Real>(
    a: &Array4<S>,
    b: &Array4<S>,
    dist: FeatureDist,
) -> Result<S, PerceptualError> {
    check_shapes(a, b)?;
    let n = S::of_f64(a.len() as f64);
    let total = match dist {
        FeatureDist::L2 => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>(),
        FeatureDist::L1 => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<S>(),
    };
    Ok(total / n)
}

/// Distance plus its gradient with respect to the first argument; the
/// gradient with respect to the second is the negation.
pub fn perceptual_distance_grad<S: Real>(
    a: &Array4<S>,
    b: &Array4<S>,
    dist: FeatureDist,
) -> Result<(S, Array4<S>), PerceptualError> {
    check_shapes(a, b)?;
    let n = S::of_f64(a.len() as f64);
    let mut grad = Array4::<S>::zeros(a.dim());
    let mut total = S::zero();
    match dist {
        FeatureDist::L2 => {
            ndarray::Zip::from(&mut grad).and(a).and(b).for_each(|g, &x, &y| {
                let d = x - y;
                total += d * d;
                *g = (S::one() + S::one()) * d / n;
            });
        }
        FeatureDist::L1 => {
            ndarray::Zip::from(&mut grad).and(a).and(b).for_each(|g, &x, &y| {
                let d = x - y;
                total += d.abs();
                *g = if d > S::zero() {
                    S::one() / n
                } else if d < S::zero() {
                    -S::one() / n
                } else {
                    S::zero()
                };
            });
        }
    }
    Ok((total / n, grad))
}

fn check_shapes<S: Real>(a: &Array4<S>, b: &Array4<S>) -> Result<(), PerceptualError> {
    if a.dim() != b.dim() {
        return Err(PerceptualError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}
