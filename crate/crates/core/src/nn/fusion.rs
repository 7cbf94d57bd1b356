use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{join, Params, ResNetRefine, Scalar, Tensor, UNetFusion};
use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};
use crate::warp::{masked_average, HalfwayPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Image channels in and out.
    pub channels: usize,
    /// Hidden feature width of both networks.
    pub width: usize,
    /// Feed the two validity masks to the U-Net as extra input channels.
    pub use_masks: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            use_masks: true,
        }
    }
}

impl FusionConfig {
    pub fn unet_inputs(&self) -> usize {
        2 * self.channels + if self.use_masks { 2 } else { 0 }
    }
}

/// The U-Net and ResNet pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNets<T> {
    pub config: FusionConfig,
    pub unet: UNetFusion<T>,
    pub resnet: ResNetRefine<T>,
}

/// Symmetric padding that brings `n` up to a multiple of 4.
fn pad_amounts(n: usize) -> (usize, usize) {
    let extra = (4 - n % 4) % 4;
    (extra / 2, extra - extra / 2)
}

fn clamp01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    // NaN survives the clamp so that `to_frame` can report it.
    t.map(|v| if v < T::zero() { T::zero() } else if v > T::one() { T::one() } else { v })
}

impl<T: Scalar> FusionNets<T> {
    pub fn new(config: FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNetFusion::new(config.unet_inputs(), config.channels, config.width, &mut rng);
        let resnet = ResNetRefine::new(2 * config.channels, config.channels, config.width, &mut rng);
        Self { config, unet, resnet }
    }

    fn check_frame(&self, f: &Frame, what: &str) -> Result<()> {
        if f.channels() != self.config.channels {
            return Err(Error::Dimensions(format!(
                "{what} has {} channels, networks expect {}",
                f.channels(),
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Stacks the U-Net input: both warped frames, then (optionally) both masks.
    pub fn unet_input(&self, minus: &Frame, plus: &Frame, mask_minus: &Mask, mask_plus: &Mask) -> Result<Tensor<T>> {
        self.check_frame(minus, "f_w_minus")?;
        self.check_frame(plus, "f_w_plus")?;
        minus.ensure_same_shape(plus, "unet input")?;
        let (a, b) = (Tensor::from_frame(minus), Tensor::from_frame(plus));
        if !self.config.use_masks {
            return Ok(Tensor::concat(&[&a, &b]));
        }
        if (mask_minus.height(), mask_minus.width()) != (minus.height(), minus.width())
            || (mask_plus.height(), mask_plus.width()) != (minus.height(), minus.width())
        {
            return Err(Error::Dimensions("mask size differs from the warped frames".into()));
        }
        let (ma, mb) = (Tensor::from_mask(mask_minus), Tensor::from_mask(mask_plus));
        Ok(Tensor::concat(&[&a, &b, &ma, &mb]))
    }

    /// U-Net on any frame size: reflect-pads to a multiple of 4 and crops the
    /// result back. Returns the unclamped output.
    pub fn unet_any_size(&self, x: &Tensor<T>) -> Tensor<T> {
        let (top, bottom) = pad_amounts(x.h);
        let (left, right) = pad_amounts(x.w);
        if top + bottom + left + right == 0 {
            return self.unet.forward(x);
        }
        let y = self.unet.forward(&x.reflect_pad(top, bottom, left, right));
        y.crop(top, left, x.h, x.w)
    }

    /// `f_int` from the two halfway-warped neighbors, clamped to [0, 1].
    pub fn intermediate(&self, minus: &Frame, plus: &Frame, mask_minus: &Mask, mask_plus: &Mask) -> Result<Frame> {
        let x = self.unet_input(minus, plus, mask_minus, mask_plus)?;
        clamp01(&self.unet_any_size(&x)).to_frame()
    }

    /// `f_hat` from `f_int` and the original frame warped onto it.
    pub fn refine(&self, f_int: &Frame, f_tilde: &Frame) -> Result<Frame> {
        self.check_frame(f_int, "f_int")?;
        self.check_frame(f_tilde, "f_tilde")?;
        f_int.ensure_same_shape(f_tilde, "resnet input")?;
        let x = Tensor::concat(&[&Tensor::from_frame(f_int), &Tensor::from_frame(f_tilde)]);
        clamp01(&self.resnet.forward(&x)).to_frame()
    }
}

impl<T: Scalar> Params<T> for FusionNets<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>)) {
        self.unet.visit(&join(prefix, "unet"), f);
        self.resnet.visit(&join(prefix, "resnet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>)) {
        self.unet.visit_mut(&join(prefix, "unet"), f);
        self.resnet.visit_mut(&join(prefix, "resnet"), f);
    }
}

/// How the middle frame is produced from the halfway pair.
#[derive(Clone, Debug)]
pub enum FusionMode {
    Learned(Box<FusionNets<f32>>),
    /// Mask-aware average of the two warped frames; the refinement step
    /// passes `f_int` through unchanged.
    Bypass,
}

impl FusionMode {
    pub fn is_bypass(&self) -> bool {
        matches!(self, FusionMode::Bypass)
    }

    pub fn intermediate(&self, pair: &HalfwayPair) -> Result<Frame> {
        match self {
            FusionMode::Learned(nets) => nets.intermediate(&pair.minus, &pair.plus, &pair.mask_minus, &pair.mask_plus),
            FusionMode::Bypass => masked_average(&[(&pair.minus, &pair.mask_minus), (&pair.plus, &pair.mask_plus)]),
        }
    }

    pub fn refine(&self, f_int: &Frame, f_tilde: &Frame) -> Result<Frame> {
        match self {
            FusionMode::Learned(nets) => nets.refine(f_int, f_tilde),
            FusionMode::Bypass => Ok(f_int.clone()),
        }
    }
}
