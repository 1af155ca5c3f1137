//! Layer primitives with explicit backward passes: strided/transposed
//! convolution (lowered onto GEMM via im2col/col2im), instance
//! normalization, activations, 2x max pooling, and channel concatenation.
//!
//! Forward functions return the output plus whatever cache the matching
//! backward needs; backward functions take the cached values and the output
//! gradient and return input and parameter gradients.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

use crate::scalar::Real;

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn deconv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// Gather conv patches: rows indexed by (channel, ky, kx), columns by output
/// position. Out-of-bounds taps read zero.
fn im2col<S: Real>(
    x: &ArrayView3<'_, S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<S>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let mut row = cols.row_mut(row_idx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let src = x.index_axis(Axis(0), ci);
                    let src_row = src.index_axis(Axis(0), iy as usize);
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        row[base + ox] = src_row[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of `im2col` back into an image gradient.
fn col2im_add<S: Real>(
    cols: &Array2<S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut ndarray::ArrayViewMut3<'_, S>,
) {
    let (c, h, w) = out.dim();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let row = cols.row(row_idx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += row[base + ox];
                    }
                }
            }
        }
    }
}

/// Strided 2D convolution. `x` is `(n, c_in, h, w)`, `w` is
/// `(c_out, c_in, k, k)`.
pub fn conv2d<S: Real>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    b: Option<&ArrayView1<'_, S>>,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, k, k2) = w.dim();
    assert_eq!(cin, cin_w, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("weights are standard layout");
    let mut y = Array4::<S>::zeros((n, cout, oh, ow));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), k, stride, pad, oh, ow);
        let prod = wmat.dot(&cols);
        let mut yi = y.index_axis_mut(Axis(0), i);
        yi.assign(
            &prod
                .into_shape((cout, oh, ow))
                .expect("gemm result reshapes"),
        );
        if let Some(bias) = b {
            for co in 0..cout {
                let bv = bias[co];
                yi.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + bv);
            }
        }
    }
    y
}

/// Gradients of `conv2d` with respect to input, weights, and bias.
pub fn conv2d_backward<S: Real>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    stride: usize,
    pad: usize,
    dy: &ArrayView4<'_, S>,
) -> (Array4<S>, Array4<S>, Array1<S>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("weights are standard layout");
    let mut dx = Array4::<S>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<S>::zeros((cout, cin * k * k));
    let mut db = Array1::<S>::zeros(cout);
    for i in 0..n {
        let dyi = dy.index_axis(Axis(0), i);
        let dy_mat = dyi
            .to_shape((cout, oh * ow))
            .expect("contiguous gradient");
        let cols = im2col(&x.index_axis(Axis(0), i), k, stride, pad, oh, ow);
        dw_mat = dw_mat + dy_mat.dot(&cols.t());
        let dcols = wmat.t().dot(&dy_mat);
        col2im_add(
            &dcols,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut dx.index_axis_mut(Axis(0), i),
        );
        for co in 0..cout {
            db[co] += dyi.index_axis(Axis(0), co).iter().copied().sum();
        }
    }
    let dw = dw_mat
        .into_shape((cout, cin, k, k))
        .expect("weight gradient reshapes");
    (dx, dw, db)
}

/// Input gradient of `conv2d` alone, for layers whose parameters stay
/// frozen.
pub fn conv2d_backward_data<S: Real>(
    w: &ArrayView4<'_, S>,
    stride: usize,
    pad: usize,
    dy: &ArrayView4<'_, S>,
    input_hw: (usize, usize),
) -> Array4<S> {
    let (n, cout, oh, ow) = dy.dim();
    let (_, cin, k, _) = w.dim();
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("weights are standard layout");
    let mut dx = Array4::<S>::zeros((n, cin, input_hw.0, input_hw.1));
    for i in 0..n {
        let dyi = dy.index_axis(Axis(0), i);
        let dy_mat = dyi
            .to_shape((cout, oh * ow))
            .expect("contiguous gradient");
        let dcols = wmat.t().dot(&dy_mat);
        col2im_add(
            &dcols,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut dx.index_axis_mut(Axis(0), i),
        );
    }
    dx
}

/// Transposed (fractionally strided) 2D convolution. `x` is
/// `(n, c_in, h, w)`, `w` is `(c_in, c_out, k, k)`; output spatial size is
/// `(h - 1) * stride + k - 2 * pad`.
pub fn conv_transpose2d<S: Real>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    b: Option<&ArrayView1<'_, S>>,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (n, cin, h, wd) = x.dim();
    let (cin_w, cout, k, _) = w.dim();
    assert_eq!(cin, cin_w, "deconv input channels");
    let oh = deconv_out_dim(h, k, stride, pad);
    let ow = deconv_out_dim(wd, k, stride, pad);
    let wmat = w
        .to_shape((cin, cout * k * k))
        .expect("weights are standard layout");
    let mut y = Array4::<S>::zeros((n, cout, oh, ow));
    for i in 0..n {
        let xi = x.index_axis(Axis(0), i);
        let xmat = xi.to_shape((cin, h * wd)).expect("contiguous input");
        let cols = wmat.t().dot(&xmat);
        col2im_add(
            &cols,
            k,
            stride,
            pad,
            h,
            wd,
            &mut y.index_axis_mut(Axis(0), i),
        );
        if let Some(bias) = b {
            let mut yi = y.index_axis_mut(Axis(0), i);
            for co in 0..cout {
                let bv = bias[co];
                yi.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + bv);
            }
        }
    }
    y
}

/// Gradients of `conv_transpose2d`.
pub fn conv_transpose2d_backward<S: Real>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    stride: usize,
    pad: usize,
    dy: &ArrayView4<'_, S>,
) -> (Array4<S>, Array4<S>, Array1<S>) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, k, _) = w.dim();
    let wmat = w
        .to_shape((cin, cout * k * k))
        .expect("weights are standard layout");
    let mut dx = Array4::<S>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<S>::zeros((cin, cout * k * k));
    let mut db = Array1::<S>::zeros(cout);
    for i in 0..n {
        let dyi = dy.index_axis(Axis(0), i);
        // The forward pass scattered columns into dy's geometry, so the
        // backward gathers them with the same index map.
        let dcols = im2col(&dyi, k, stride, pad, h, wd);
        let xi = x.index_axis(Axis(0), i);
        let xmat = xi.to_shape((cin, h * wd)).expect("contiguous input");
        dx.index_axis_mut(Axis(0), i).assign(
            &wmat
                .dot(&dcols)
                .into_shape((cin, h, wd))
                .expect("gemm result reshapes"),
        );
        dw_mat = dw_mat + xmat.dot(&dcols.t());
        for co in 0..cout {
            db[co] += dyi.index_axis(Axis(0), co).iter().copied().sum();
        }
    }
    let dw = dw_mat
        .into_shape((cin, cout, k, k))
        .expect("weight gradient reshapes");
    (dx, dw, db)
}

/// Per-sample, per-channel statistics cached for the backward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache<S> {
    pub mean: Array2<S>,
    pub inv_std: Array2<S>,
}

/// Instance normalization: each (sample, channel) plane is standardized with
/// its own biased mean/variance, then scaled and shifted.
pub fn instance_norm<S: Real>(
    x: &ArrayView4<'_, S>,
    scale: &ArrayView1<'_, S>,
    shift: &ArrayView1<'_, S>,
    eps: S,
) -> (Array4<S>, InstanceNormCache<S>) {
    let (n, c, h, w) = x.dim();
    let count = S::of_f64((h * w) as f64);
    let mut y = Array4::<S>::zeros((n, c, h, w));
    let mut mean = Array2::<S>::zeros((n, c));
    let mut inv_std = Array2::<S>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(ndarray::s![i, ch, .., ..]);
            let m: S = plane.iter().copied().sum::<S>() / count;
            let var: S = plane
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<S>()
                / count;
            let inv = S::one() / (var + eps).sqrt();
            mean[[i, ch]] = m;
            inv_std[[i, ch]] = inv;
            let g = scale[ch];
            let b = shift[ch];
            let mut out = y.slice_mut(ndarray::s![i, ch, .., ..]);
            out.assign(&plane.mapv(|v| g * (v - m) * inv + b));
        }
    }
    (y, InstanceNormCache { mean, inv_std })
}

/// Gradients of `instance_norm` with respect to input, scale, and shift.
pub fn instance_norm_backward<S: Real>(
    x: &ArrayView4<'_, S>,
    scale: &ArrayView1<'_, S>,
    cache: &InstanceNormCache<S>,
    dy: &ArrayView4<'_, S>,
) -> (Array4<S>, Array1<S>, Array1<S>) {
    let (n, c, h, w) = x.dim();
    let count = S::of_f64((h * w) as f64);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    let mut dscale = Array1::<S>::zeros(c);
    let mut dshift = Array1::<S>::zeros(c);
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(ndarray::s![i, ch, .., ..]);
            let dplane = dy.slice(ndarray::s![i, ch, .., ..]);
            let m = cache.mean[[i, ch]];
            let inv = cache.inv_std[[i, ch]];
            let g = scale[ch];

            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for (&v, &d) in plane.iter().zip(dplane.iter()) {
                let xhat = (v - m) * inv;
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
            dscale[ch] += sum_dy_xhat;
            dshift[ch] += sum_dy;

            let mut out = dx.slice_mut(ndarray::s![i, ch, .., ..]);
            ndarray::Zip::from(&mut out)
                .and(&plane)
                .and(&dplane)
                .for_each(|o, &v, &d| {
                    let xhat = (v - m) * inv;
                    *o = g * inv * (d - (sum_dy + xhat * sum_dy_xhat) / count);
                });
        }
    }
    (dx, dscale, dshift)
}

pub fn leaky_relu<S: Real>(x: &Array4<S>, slope: S) -> Array4<S> {
    x.mapv(|v| if v > S::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<S: Real>(x: &Array4<S>, slope: S, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= S::zero() {
            *d *= slope;
        }
    });
    dx
}

pub fn relu<S: Real>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| v.max(S::zero()))
}

pub fn relu_backward<S: Real>(x: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= S::zero() {
            *d = S::zero();
        }
    });
    dx
}

pub fn tanh<S: Real>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh given the forward *output*.
pub fn tanh_backward<S: Real>(y: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &t| *d *= S::one() - t * t);
    dx
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Returns the pooled map and the flat argmax (0..4) per output cell.
pub fn maxpool2<S: Real>(x: &Array4<S>) -> (Array4<S>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[[i, ch, 2 * oy, 2 * ox]];
                    let mut best_k = 0u8;
                    for (kdx, (dy_, dx_)) in
                        [(0usize, 0usize), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                    {
                        let v = x[[i, ch, 2 * oy + dy_, 2 * ox + dx_]];
                        if v > best {
                            best = v;
                            best_k = kdx as u8;
                        }
                    }
                    y[[i, ch, oy, ox]] = best;
                    arg[[i, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<S: Real>(
    arg: &Array4<u8>,
    dy: &Array4<S>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::<S>::zeros(input_dim);
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = arg[[i, ch, oy, ox]] as usize;
                    let (ddy, ddx) = (k / 2, k % 2);
                    dx[[i, ch, 2 * oy + ddy, 2 * ox + ddx]] += dy[[i, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<S: Real>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat shapes agree")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<S: Real>(d: &Array4<S>, first: usize) -> (Array4<S>, Array4<S>) {
    let a = d.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}
