//! In-memory image type and the pixel conventions the rest of the pipeline
//! relies on: storage values live in [0, 1], network inputs in [-1, 1]
//! (y = 2x - 1), 8-bit files are quantized with round-half-up, and bilinear
//! resampling uses half-pixel-centered source coordinates with edge clamp.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array3, Array4, Axis};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image has {found} channels, expected 1 or 3")]
    BadChannels { found: usize },
    #[error("image dimensions {h}x{w} are empty")]
    EmptyDims { h: usize, w: usize },
    #[error("image contains a non-finite value at ({y}, {x}, {c})")]
    NonFinite { y: usize, x: usize, c: usize },
    #[error("expected a 3-channel image, found {found} channels")]
    NotRgb { found: usize },
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
}

/// An image with `(height, width, channels)` layout, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    data: Array3<S>,
}

impl<S: Real> Image<S> {
    /// Validate and clamp into [0, 1]. Non-finite samples are rejected.
    pub fn new(data: Array3<S>) -> Result<Self, ImageError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(ImageError::EmptyDims { h, w });
        }
        if c != 1 && c != 3 {
            return Err(ImageError::BadChannels { found: c });
        }
        let mut data = data;
        for ((y, x, ch), v) in data.indexed_iter_mut() {
            if !v.is_finite() {
                return Err(ImageError::NonFinite { y, x, c: ch });
            }
            *v = v.max(S::zero()).min(S::one());
        }
        Ok(Image { data })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Result<Self, ImageError> {
        Image::new(Array3::from_shape_fn((h, w, c), |(y, x, ch)| f(y, x, ch)))
    }

    pub fn constant(h: usize, w: usize, c: usize, value: S) -> Result<Self, ImageError> {
        Image::new(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[[y, x, c]]
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    /// Decode an 8-bit PNG (or any format the codec recognizes). Grayscale
    /// files keep one channel; everything else is read as RGB.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let decoded = image::open(path).map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            source: e,
        })?;
        let scale = S::of_f64(1.0 / 255.0);
        let img = match &decoded {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    S::of_f64(f64::from(g.get_pixel(x as u32, y as u32)[0])) * scale
                })
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                    S::of_f64(f64::from(rgb.get_pixel(x as u32, y as u32)[c])) * scale
                })
            }
        };
        Image::new(img)
    }

    /// Quantize with round-half-up to 8 bits and encode by file extension.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let (h, w, c) = self.dim();
        let quant = |v: S| -> u8 { (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8 };
        let result = if c == 1 {
            let mut buf = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([quant(self.get(y, x, 0))]));
                }
            }
            buf.save(path)
        } else {
            let mut buf = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        quant(self.get(y, x, 0)),
                        quant(self.get(y, x, 1)),
                        quant(self.get(y, x, 2)),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path)
        };
        result.map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Bilinear resample: destination pixel centers map to source coordinates
    /// `(i + 0.5) * src/dst - 0.5`, clamped to the source borders.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<Self, ImageError> {
        let (h, w, c) = self.dim();
        if new_h == 0 || new_w == 0 {
            return Err(ImageError::EmptyDims { h: new_h, w: new_w });
        }
        if new_h == h && new_w == w {
            return Ok(self.clone());
        }
        let sy = h as f64 / new_h as f64;
        let sx = w as f64 / new_w as f64;
        let out = Array3::from_shape_fn((new_h, new_w, c), |(dy, dx, ch)| {
            let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            let v00 = self.get(y0, x0, ch).as_f64();
            let v01 = self.get(y0, x1, ch).as_f64();
            let v10 = self.get(y1, x0, ch).as_f64();
            let v11 = self.get(y1, x1, ch).as_f64();
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            S::of_f64(top + (bot - top) * ty)
        });
        Image::new(out)
    }

    /// Rec.601 luminance: 0.299 R + 0.587 G + 0.114 B.
    pub fn to_luma(&self) -> Result<Self, ImageError> {
        let (h, w, c) = self.dim();
        if c != 3 {
            return Err(ImageError::NotRgb { found: c });
        }
        let out = Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            let r = self.get(y, x, 0).as_f64();
            let g = self.get(y, x, 1).as_f64();
            let b = self.get(y, x, 2).as_f64();
            S::of_f64(0.299 * r + 0.587 * g + 0.114 * b)
        });
        Image::new(out)
    }

    /// Map [0, 1] to the network range [-1, 1].
    pub fn normalize(&self) -> NormalizedImage<S> {
        let two = S::of_f64(2.0);
        NormalizedImage {
            data: self.data.mapv(|v| two * v - S::one()),
        }
    }
}

/// An image in the network value range [-1, 1], `(h, w, c)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage<S> {
    data: Array3<S>,
}

impl<S: Real> NormalizedImage<S> {
    pub fn from_array(data: Array3<S>) -> Self {
        NormalizedImage { data }
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Map back to storage range, clamping whatever the network produced.
    pub fn denormalize(&self) -> Image<S> {
        let half = S::of_f64(0.5);
        let arr = self.data.mapv(|v| {
            let v = if v.is_finite() { v } else { S::zero() };
            ((v + S::one()) * half).max(S::zero()).min(S::one())
        });
        Image::new(arr).expect("denormalized values are finite and clamped")
    }

    /// `(c, h, w)` layout used by the networks.
    pub fn to_chw(&self) -> Array3<S> {
        self.data.view().permuted_axes([2, 0, 1]).to_owned()
    }

    pub fn from_chw(chw: Array3<S>) -> Self {
        NormalizedImage {
            data: chw.permuted_axes([1, 2, 0]).to_owned(),
        }
    }
}

/// Stack normalized images into an `(n, c, h, w)` batch.
pub fn to_batch<S: Real>(images: &[NormalizedImage<S>]) -> Array4<S> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w, c) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, c), "batch images must share shape");
        out.index_axis_mut(Axis(0), i).assign(&img.to_chw());
    }
    out
}

/// Split an `(n, c, h, w)` batch back into normalized images.
pub fn from_batch<S: Real>(batch: &Array4<S>) -> Vec<NormalizedImage<S>> {
    (0..batch.dim().0)
        .map(|i| NormalizedImage::from_chw(batch.index_axis(Axis(0), i).to_owned()))
        .collect()
}
