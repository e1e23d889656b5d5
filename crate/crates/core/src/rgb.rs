//! RGB rasters, the two-layer strided convolutional embedding and the
//! RGB/depth fusion block.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::pnm;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Planar `[3×H×W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pixels: Tensor<f32>,
}

impl RgbImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::Validation(format!(
                "rgb image must be 3×H×W, got {:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(RgbImage { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let r = pnm::decode(bytes, b"P6", 3, "ppm")?;
        let plane = r.width * r.height;
        let data = Tensor::from_fn(vec![3, r.height, r.width], |i| {
            let (c, p) = (i / plane, i % plane);
            r.data[p * 3 + c] as f32 / 255.0
        });
        RgbImage::new(data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.pixels.data();
        let interleaved: Vec<u8> = (0..plane * 3)
            .map(|i| (d[(i % 3) * plane + i / 3] * 255.0).round() as u8)
            .collect();
        pnm::encode(b"P6", w, h, &interleaved)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Output grid of the RGB embedding for an `h×w` image.
pub fn feature_grid(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2))
}

/// Two 3×3 stride-2 same-padded convolutions, each followed by GeLU.
#[derive(Clone, Debug)]
pub struct RgbEncoder {
    pub channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl RgbEncoder {
    pub fn new(prefix: &str, channels: usize) -> Self {
        RgbEncoder {
            channels,
            conv1: Conv2d::new(format!("{prefix}.embed1"), 3, channels, 3, 2),
            conv2: Conv2d::new(format!("{prefix}.embed2"), channels, channels, 3, 2),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Var> {
        let s = tape.shape(img).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("rgb_embed", &s, &[3]));
        }
        if s[1] < 4 || s[2] < 4 {
            return Err(Error::Validation(format!(
                "image {}×{} smaller than 4×4",
                s[1], s[2]
            )));
        }
        let x = self.conv1.forward(tape, p, img)?;
        let x = tape.gelu(x)?;
        let x = self.conv2.forward(tape, p, x)?;
        tape.gelu(x)
    }
}

/// `concat[rgb; depth] → 1×1 conv → GeLU → 3×3 conv`, 2C → C channels.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub channels: usize,
    reduce: Conv2d,
    refine: Conv2d,
}

impl Fusion {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Fusion {
            channels,
            reduce: Conv2d::new(format!("{prefix}.reduce"), 2 * channels, channels, 1, 1),
            refine: Conv2d::new(format!("{prefix}.refine"), channels, channels, 3, 1),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.reduce.init(store, rng);
        self.refine.init(store, rng);
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        rgb: Var,
        depth: Var,
    ) -> Result<Var> {
        let (a, b) = (tape.shape(rgb), tape.shape(depth));
        if a != b || a.len() != 3 || a[0] != self.channels {
            return Err(Error::shape("fuse", a, b));
        }
        let x = tape.concat_channels(rgb, depth)?;
        let x = self.reduce.forward(tape, p, x)?;
        let x = tape.gelu(x)?;
        self.refine.forward(tape, p, x)
    }
}

/// Free-function form of [`RgbEncoder::forward`] on an image.
pub fn rgb_embed<T: Real>(
    tape: &mut Tape<T>,
    enc: &RgbEncoder,
    p: &Bound,
    img: &RgbImage,
) -> Result<Var> {
    let x = tape.constant(img.pixels().cast());
    enc.forward(tape, p, x)
}

/// Free-function form of [`Fusion::forward`].
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    fusion: &Fusion,
    p: &Bound,
    rgb: Var,
    depth: Var,
) -> Result<Var> {
    fusion.forward(tape, p, rgb, depth)
}
