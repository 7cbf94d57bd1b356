//! Unsupervised training of the fusion networks.
//!
//! The target of every example is a randomly translated copy `f_s` of the
//! middle frame. Both neighbors are warped fully onto `f_s`, the U-Net fuses
//! them into `f_int`, the original frame is warped onto `f_int` and the
//! ResNet produces `f_hat`. L1 and perceptual losses are applied to both
//! `f_hat` and `f_int`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, AnalyticOracle, FlowEstimator, Provenance};
use crate::frame::{Frame, Mask, VideoSequence};
use crate::geometry::Affine2;
use crate::io::{load_sequence, write_atomic};
use crate::nn::{
    assign_from_container, conv_backward, conv_forward, flatten, join, param_count, read_container, zero_params,
    Container, Conv2d, FusionConfig, FusionMode, FusionNets, Params, Tensor,
};
use crate::synth::{generate_jitter_video, GroundTruth, JitterSpec};
use crate::warp::{backward_warp, translate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    FixedRandom,
    PretrainedDeep,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Initialization seed of the fixed random extractor.
    pub seed: u64,
    /// Weight container of the pretrained extractor.
    pub weights: Option<PathBuf>,
}

/// Training clips: procedurally generated jitter clips plus any folders of
/// numbered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic_clips: usize,
    /// Template for the generated clips; clip `k` uses seed `seed + k`.
    pub synthetic: JitterSpec,
    pub folders: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_clips: 50,
            synthetic: JitterSpec {
                frames: 8,
                width: 320,
                height: 256,
                sigma: 3.0,
                ..JitterSpec::default()
            },
            folders: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub patch_size: usize,
    pub epochs: usize,
    /// First epoch of the linear decay to zero.
    pub decay_start: usize,
    /// Bound on the pseudo-ground-truth shift as a fraction of frame width.
    pub max_translation_fraction: f64,
    pub flips: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub extractor: ExtractorConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            patch_size: 256,
            epochs: 200,
            decay_start: 100,
            max_translation_fraction: 0.125,
            flips: true,
            seed: 0,
            max_steps: None,
            extractor: ExtractorConfig::default(),
            fusion: FusionConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.max_translation_fraction > 0.0 && self.max_translation_fraction < 0.5) {
            return fail(format!(
                "max_translation_fraction {} must lie in (0, 1/2)",
                self.max_translation_fraction
            ));
        }
        if self.decay_start >= self.epochs {
            return fail(format!("decay_start {} must be below epochs {}", self.decay_start, self.epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.patch_size < 16 || self.patch_size % 4 != 0 {
            return fail(format!("patch_size {} must be a multiple of 4 and at least 16", self.patch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be nonnegative", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if self.extractor.kind == ExtractorKind::PretrainedDeep && self.extractor.weights.is_none() {
            return fail("the pretrained extractor needs `weights`".into());
        }
        Ok(())
    }

    /// Constant until `decay_start`, then linear down to zero at `epochs`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start {
            return self.learning_rate;
        }
        let span = (self.epochs - self.decay_start) as f64;
        self.learning_rate * (1.0 - (epoch - self.decay_start) as f64 / span).max(0.0)
    }
}

/// Shift of the pseudo ground truth: uniform direction, magnitude uniform
/// in `[0, max_fraction * width]`.
pub fn draw_translation(width: usize, max_fraction: f64, rng: &mut impl Rng) -> (f64, f64) {
    let radius = rng.random_range(0.0..=max_fraction * width as f64);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    (radius * angle.cos(), radius * angle.sin())
}

/// `f_s(p) = f_i(p - t)`, zero outside with its validity mask.
pub fn pseudo_gt_with_shift(f_i: &Frame, t: (f64, f64), max_fraction: f64) -> Result<(Frame, Mask)> {
    if f_i.width() < 16 {
        return Err(Error::Dimensions(format!("frame width {} is below 16", f_i.width())));
    }
    let bound = max_fraction * f_i.width() as f64;
    if t.0.hypot(t.1) > bound * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "shift ({}, {}) exceeds {bound} px",
            t.0, t.1
        )));
    }
    Ok(translate(f_i, t.0 as f32, t.1 as f32))
}

#[derive(Clone, Debug)]
pub struct PseudoGt {
    pub f_s: Frame,
    pub mask: Mask,
    pub shift: (f64, f64),
}

pub fn make_pseudo_gt(f_i: &Frame, max_fraction: f64, rng: &mut impl Rng) -> Result<PseudoGt> {
    let shift = draw_translation(f_i.width(), max_fraction, rng);
    let (f_s, mask) = pseudo_gt_with_shift(f_i, shift, max_fraction)?;
    Ok(PseudoGt { f_s, mask, shift })
}

/// One prepared training input.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub minus: Frame,
    pub plus: Frame,
    pub mask_minus: Mask,
    pub mask_plus: Mask,
    /// The (augmented) middle frame.
    pub f_i: Frame,
    pub f_s: Frame,
    /// Where `f_s` has content.
    pub mask_s: Mask,
}

/// Registers `target.f_s` as a translate of `f_i` and warps both
/// neighbors fully onto it.
pub fn build_training_example(
    prev: &Frame,
    f_i: &Frame,
    next: &Frame,
    target: &PseudoGt,
    estimator: &dyn FlowEstimator,
) -> Result<TrainingExample> {
    register_pseudo_gt(f_i, target, estimator);
    warp_onto_target(prev, f_i, next, &target.f_s, &target.mask, estimator)
}

pub fn register_pseudo_gt(f_i: &Frame, target: &PseudoGt, estimator: &dyn FlowEstimator) {
    let (tx, ty) = target.shift;
    estimator.register_derived(
        &target.f_s,
        Provenance::Resampled {
            of: f_i,
            map: Affine2::translation(-tx, -ty),
        },
    );
}

/// Warps both neighbors onto an already registered target.
pub fn warp_onto_target(
    prev: &Frame,
    f_i: &Frame,
    next: &Frame,
    f_s: &Frame,
    mask_s: &Mask,
    estimator: &dyn FlowEstimator,
) -> Result<TrainingExample> {
    prev.ensure_same_shape(f_i, "training triplet")?;
    next.ensure_same_shape(f_i, "training triplet")?;
    f_s.ensure_same_shape(f_i, "pseudo ground truth")?;
    let to_prev = estimate_flow(estimator, f_s, prev)?;
    let to_next = estimate_flow(estimator, f_s, next)?;
    let (minus, mask_minus) = backward_warp(prev, &to_prev, 1.0)?;
    let (plus, mask_plus) = backward_warp(next, &to_next, 1.0)?;
    Ok(TrainingExample {
        minus,
        plus,
        mask_minus,
        mask_plus,
        f_i: f_i.clone(),
        f_s: f_s.clone(),
        mask_s: mask_s.clone(),
    })
}

fn crop_registered(f: &Frame, top: usize, left: usize, size: usize, est: &dyn FlowEstimator) -> Result<Frame> {
    let out = f.crop(top, left, size, size)?;
    est.register_derived(
        &out,
        Provenance::Resampled {
            of: f,
            map: Affine2::translation(left as f64, top as f64),
        },
    );
    Ok(out)
}

fn flip_registered(f: &Frame, horizontal: bool, est: &dyn FlowEstimator) -> Frame {
    let (out, map) = if horizontal {
        (f.flip_horizontal(), Affine2::new(-1.0, 0.0, (f.width() - 1) as f64, 0.0, 1.0, 0.0))
    } else {
        (f.flip_vertical(), Affine2::new(1.0, 0.0, 0.0, 0.0, -1.0, (f.height() - 1) as f64))
    };
    est.register_derived(&out, Provenance::Resampled { of: f, map });
    out
}

/// Random crop plus optional flips, shared by every frame of an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub patch: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn draw(height: usize, width: usize, patch: usize, flips: bool, rng: &mut impl Rng) -> Result<Self> {
        if height < patch || width < patch {
            return Err(Error::Dimensions(format!(
                "{height}x{width} frames are smaller than the {patch} px patch"
            )));
        }
        Ok(Self {
            top: rng.random_range(0..=height - patch),
            left: rng.random_range(0..=width - patch),
            patch,
            flip_h: flips && rng.random_bool(0.5),
            flip_v: flips && rng.random_bool(0.5),
        })
    }

    fn crops(&self, height: usize, width: usize) -> bool {
        (height, width) != (self.patch, self.patch)
    }

    /// Applies the crop and flips, registering each result with `estimator`.
    pub fn apply(&self, f: &Frame, estimator: &dyn FlowEstimator) -> Result<Frame> {
        let mut g = if self.crops(f.height(), f.width()) {
            crop_registered(f, self.top, self.left, self.patch, estimator)?
        } else {
            f.clone()
        };
        if self.flip_h {
            g = flip_registered(&g, true, estimator);
        }
        if self.flip_v {
            g = flip_registered(&g, false, estimator);
        }
        Ok(g)
    }

    pub fn apply_mask(&self, m: &Mask) -> Result<Mask> {
        let mut g = if self.crops(m.height(), m.width()) {
            m.crop(self.top, self.left, self.patch, self.patch)?
        } else {
            m.clone()
        };
        if self.flip_h {
            g = g.flip_horizontal();
        }
        if self.flip_v {
            g = g.flip_vertical();
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    /// Convolution followed by a ramp; `index` names the parameters.
    Conv { index: usize, conv: Conv2d<f32> },
    MaxPool,
}

/// Frozen convolutional feature extractor for the perceptual loss.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    layers: Vec<Layer>,
    mean: [f32; 3],
    std: [f32; 3],
}

enum LayerCache {
    Conv { input: Tensor<f32>, pre: Tensor<f32> },
    MaxPool { h: usize, w: usize, argmax: Vec<usize> },
}

impl Params<f32> for FeatureExtractor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f32], Vec<usize>)) {
        for layer in &self.layers {
            if let Layer::Conv { index, conv } = layer {
                conv.visit(&join(prefix, &format!("features.{index}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f32], Vec<usize>)) {
        for layer in &mut self.layers {
            if let Layer::Conv { index, conv } = layer {
                conv.visit_mut(&join(prefix, &format!("features.{index}")), f);
            }
        }
    }
}

/// Channel plan of the deep classification network up to its `relu4_3`
/// features; `0` marks a 2x2 max-pool.
const DEEP_PLAN: [usize; 13] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512];
const DEEP_LAST: usize = 512;

impl FeatureExtractor {
    /// Three ramp-activated convolutions (3->16, 16->16 stride 2, 16->32)
    /// with seeded He initialization.
    pub fn fixed_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7068_6900);
        let plan = [(3, 16, 1), (16, 16, 2), (16, 32, 1)];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| Layer::Conv {
                index: 2 * i,
                conv: Conv2d::init(a, b, 3, s, 0.0, &mut rng),
            })
            .collect();
        Self {
            kind: ExtractorKind::FixedRandom,
            layers,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Architecture of the deep extractor with zero weights; tensors are
    /// named `features.<i>.weight` / `features.<i>.bias` with the usual
    /// sequential layer numbering (a ramp after every convolution).
    pub fn deep_architecture() -> Self {
        let mut layers = Vec::new();
        let (mut index, mut in_ch) = (0, 3);
        for &c in DEEP_PLAN.iter().chain(std::iter::once(&DEEP_LAST)) {
            if c == 0 {
                layers.push(Layer::MaxPool);
                index += 1;
            } else {
                layers.push(Layer::Conv {
                    index,
                    conv: Conv2d::zeros(in_ch, c, 3, 1),
                });
                index += 2;
                in_ch = c;
            }
        }
        Self {
            kind: ExtractorKind::PretrainedDeep,
            layers,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    /// Loads the deep extractor from a tensor container; tensors past the
    /// last used layer are ignored.
    pub fn pretrained(path: &Path) -> Result<Self> {
        let mut ex = Self::deep_architecture();
        let mut names = Vec::new();
        ex.visit("", &mut |n, _, _| names.push(n));
        let c = read_container(path)?;
        let wanted = Container {
            step: c.step,
            meta: c.meta,
            tensors: c.tensors.into_iter().filter(|t| names.contains(&t.name)).collect(),
        };
        assign_from_container(&mut ex, &wanted).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(ex)
    }

    pub fn from_config(cfg: &ExtractorConfig) -> Result<Self> {
        match cfg.kind {
            ExtractorKind::FixedRandom => Ok(Self::fixed_random(cfg.seed)),
            ExtractorKind::PretrainedDeep => {
                let path = cfg
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Config("the pretrained extractor needs `weights`".into()))?;
                Self::pretrained(path)
            }
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    fn normalize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut out = x.clone();
        let plane = x.plane();
        for c in 0..x.c.min(3) {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn features(&self, x: &Tensor<f32>) -> Tensor<f32> {
        self.features_cached(x).0
    }

    fn features_cached(&self, x: &Tensor<f32>) -> (Tensor<f32>, Vec<LayerCache>) {
        let mut h = self.normalize(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, .. } => {
                    let pre = conv_forward(&h, &[conv]).pop().expect("one bank");
                    let out = pre.map(|v| v.max(0.0));
                    caches.push(LayerCache::Conv { input: h, pre });
                    h = out;
                }
                Layer::MaxPool => {
                    let (out, argmax) = max_pool2(&h);
                    caches.push(LayerCache::MaxPool { h: h.h, w: h.w, argmax });
                    h = out;
                }
            }
        }
        (h, caches)
    }

    /// Gradient with respect to the extractor input.
    fn backward(&self, caches: &[LayerCache], dy: Tensor<f32>) -> Tensor<f32> {
        let mut g = dy;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv { conv, .. }, LayerCache::Conv { input, pre }) => {
                    let d = g.zip_map(pre, |d, p| if p > 0.0 { d } else { 0.0 });
                    conv_backward(input, &[conv], &[&d], None)
                }
                (Layer::MaxPool, LayerCache::MaxPool { h, w, argmax }) => {
                    let mut dx = Tensor::zeros(g.c, *h, *w);
                    for (i, &src) in argmax.iter().enumerate() {
                        dx.data[src] += g.data[i];
                    }
                    dx
                }
                _ => unreachable!("cache matches its layer"),
            };
        }
        let plane = g.plane();
        for c in 0..g.c.min(3) {
            for v in &mut g.data[c * plane..(c + 1) * plane] {
                *v /= self.std[c];
            }
        }
        g
    }
}

fn max_pool2(x: &Tensor<f32>) -> (Tensor<f32>, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut argmax = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = c * x.plane() + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = c * x.plane() + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[(c * oh + y) * ow + xx] = x.data[best];
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Loss terms of one example (or their batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1_out: f64,
    pub perceptual_out: f64,
    pub l1_int: f64,
    pub perceptual_int: f64,
    pub total: f64,
}

impl LossReport {
    fn new(l1_out: f64, perceptual_out: f64, l1_int: f64, perceptual_int: f64) -> Self {
        Self {
            l1_out,
            perceptual_out,
            l1_int,
            perceptual_int,
            total: l1_out + perceptual_out + l1_int + perceptual_int,
        }
    }

    fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::new(
            sum(|r| r.l1_out),
            sum(|r| r.perceptual_out),
            sum(|r| r.l1_int),
            sum(|r| r.perceptual_int),
        )
    }
}

fn mask_tensor(mask: Option<&Mask>, h: usize, w: usize) -> Tensor<f32> {
    match mask {
        Some(m) => Tensor::from_mask(m),
        None => Tensor::from_vec(1, h, w, vec![1.0; h * w]),
    }
}

fn apply_mask(x: &Tensor<f32>, m: &Tensor<f32>) -> Tensor<f32> {
    let plane = x.plane();
    let mut out = x.clone();
    for c in 0..x.c {
        for (v, &k) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(&m.data) {
            *v *= k;
        }
    }
    out
}

/// Masked mean absolute difference and masked perceptual distance of
/// `pred` against `target`, with the gradient of their sum.
fn loss_and_grad(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    target_features: &Tensor<f32>,
    mask: &Tensor<f32>,
    extractor: &FeatureExtractor,
    want_grad: bool,
) -> (f64, f64, Option<Tensor<f32>>) {
    let plane = pred.plane();
    let valid = mask.data.iter().filter(|&&m| m > 0.0).count() * pred.c;
    let mut l1 = 0.0f64;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    if valid > 0 {
        let scale = 1.0 / valid as f32;
        for c in 0..pred.c {
            for i in 0..plane {
                if mask.data[i] > 0.0 {
                    let d = pred.data[c * plane + i] - target.data[c * plane + i];
                    l1 += d.abs() as f64;
                    grad.data[c * plane + i] = if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
            }
        }
        l1 /= valid as f64;
    }
    let masked = apply_mask(pred, mask);
    let (feat, caches) = extractor.features_cached(&masked);
    let n = feat.data.len() as f64;
    let perceptual = feat
        .data
        .iter()
        .zip(&target_features.data)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n;
    if !want_grad {
        return (l1, perceptual, None);
    }
    let dfeat = feat.zip_map(target_features, |a, b| 2.0 * (a - b) / n as f32);
    let dmasked = extractor.backward(&caches, dfeat);
    grad.add_assign(&apply_mask(&dmasked, mask));
    (l1, perceptual, Some(grad))
}

fn to_tensor_checked(a: &Frame, b: &Frame, what: &str) -> Result<(Tensor<f32>, Tensor<f32>)> {
    a.ensure_same_shape(b, what)?;
    Ok((Tensor::from_frame(a), Tensor::from_frame(b)))
}

/// All four loss terms. With a mask, pixels outside it are ignored by the
/// L1 terms and zeroed in both images before feature extraction.
pub fn compute_losses(
    f_hat: &Frame,
    f_int: &Frame,
    f_s: &Frame,
    mask: Option<&Mask>,
    extractor: &FeatureExtractor,
) -> Result<LossReport> {
    let (hat, target) = to_tensor_checked(f_hat, f_s, "f_hat vs f_s")?;
    let (int, _) = to_tensor_checked(f_int, f_s, "f_int vs f_s")?;
    if let Some(m) = mask {
        if (m.height(), m.width()) != (f_s.height(), f_s.width()) {
            return Err(Error::Dimensions("loss mask size differs from the frames".into()));
        }
    }
    let m = mask_tensor(mask, f_s.height(), f_s.width());
    let target_features = extractor.features(&apply_mask(&target, &m));
    let (l1_out, p_out, _) = loss_and_grad(&hat, &target, &target_features, &m, extractor, false);
    let (l1_int, p_int, _) = loss_and_grad(&int, &target, &target_features, &m, extractor, false);
    Ok(LossReport::new(l1_out, p_out, l1_int, p_int))
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Forward and backward pass for one example. The clamp at each network
/// output is treated as the identity in the backward pass, and `f_tilde`
/// (which depends on `f_int` only through flow estimation) is a constant.
pub fn example_gradients(
    nets: &FusionNets<f32>,
    ex: &TrainingExample,
    extractor: &FeatureExtractor,
    estimator: &dyn FlowEstimator,
) -> Result<(LossReport, FusionNets<f32>)> {
    let x = nets.unet_input(&ex.minus, &ex.plus, &ex.mask_minus, &ex.mask_plus)?;
    if x.h % 4 != 0 || x.w % 4 != 0 {
        return Err(Error::Dimensions(format!("training patches must be multiples of 4, got {}x{}", x.h, x.w)));
    }
    let (raw_int, ucache) = nets.unet.forward_cached(&x);
    let int_t = clamp01(&raw_int);
    let f_int = int_t.to_frame()?;
    estimator.register_derived(&f_int, Provenance::AlignedWith(&ex.f_s));
    let flow = estimate_flow(estimator, &f_int, &ex.f_i)?;
    let (f_tilde, _) = backward_warp(&ex.f_i, &flow, 1.0)?;
    let xr = Tensor::concat(&[&int_t, &Tensor::from_frame(&f_tilde)]);
    let (raw_hat, rcache) = nets.resnet.forward_cached(&xr);
    let hat_t = clamp01(&raw_hat);
    if !hat_t.is_finite() {
        return Err(Error::NonFinite("network activations".into()));
    }

    let target = Tensor::from_frame(&ex.f_s);
    let m = Tensor::from_mask(&ex.mask_s);
    let target_features = extractor.features(&apply_mask(&target, &m));
    let (l1_out, p_out, d_hat) = loss_and_grad(&hat_t, &target, &target_features, &m, extractor, true);
    let (l1_int, p_int, d_int) = loss_and_grad(&int_t, &target, &target_features, &m, extractor, true);

    let mut grads = nets.clone();
    zero_params(&mut grads);
    let dxr = nets.resnet.backward(&rcache, &d_hat.expect("gradient requested"), &mut grads.resnet);
    let mut d_int = d_int.expect("gradient requested");
    let through_resnet = &dxr.split(&[int_t.c, int_t.c])[0];
    d_int.add_assign(through_resnet);
    nets.unet.backward(&ucache, &d_int, &mut grads.unet);
    Ok((LossReport::new(l1_out, p_out, l1_int, p_int), grads))
}

/// Adam with bias correction over every parameter of the fusion networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(nets: &FusionNets<f32>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let n = param_count(nets);
        Self {
            beta1,
            beta2,
            epsilon,
            steps: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, nets: &mut FusionNets<f32>, grad: &[f32], lr: f64) {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let (m, v, eps) = (&mut self.m, &mut self.v, self.epsilon);
        let mut at = 0;
        nets.visit_mut("", &mut |_, data, _| {
            for p in data.iter_mut() {
                let g = grad[at] as f64;
                let mi = b1 * m[at] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[at] as f64 + (1.0 - b2) * g * g;
                m[at] = mi as f32;
                v[at] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
                at += 1;
            }
        });
    }
}

/// Mean loss and mean gradient over a batch; per-example work runs in
/// parallel and is summed in batch order.
pub fn batch_gradients(
    nets: &FusionNets<f32>,
    batch: &[TrainingExample],
    extractor: &FeatureExtractor,
    estimator: &dyn FlowEstimator,
) -> Result<(LossReport, Vec<f32>)> {
    let results: Vec<Result<(LossReport, FusionNets<f32>)>> = batch
        .par_iter()
        .map(|ex| example_gradients(nets, ex, extractor, estimator))
        .collect();
    let mut reports = Vec::with_capacity(batch.len());
    let mut sum: Option<Vec<f32>> = None;
    for r in results {
        let (report, g) = r?;
        reports.push(report);
        let g = flatten(&g);
        match sum.as_mut() {
            None => sum = Some(g),
            Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let mut grad = sum.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f32;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((LossReport::mean(&reports), grad))
}

/// One optimizer step at learning rate `lr`.
pub fn training_step(
    nets: &mut FusionNets<f32>,
    optimizer: &mut Adam,
    batch: &[TrainingExample],
    lr: f64,
    extractor: &FeatureExtractor,
    estimator: &dyn FlowEstimator,
) -> Result<LossReport> {
    let (report, grad) = batch_gradients(nets, batch, extractor, estimator)?;
    if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "training loss (l1_out {}, perceptual_out {}, l1_int {}, perceptual_int {})",
            report.l1_out, report.perceptual_out, report.l1_int, report.perceptual_int
        )));
    }
    optimizer.step(nets, &grad, lr);
    Ok(report)
}

/// Clips and the triplets drawn from them.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub clips: Vec<VideoSequence>,
}

impl TrainingSet {
    /// Generates the synthetic clips (registering their poses with `oracle`
    /// when given, clip `k` as scene `k`) and loads the frame folders.
    pub fn from_config(data: &DataConfig, oracle: Option<&AnalyticOracle>) -> Result<Self> {
        let synthetic: Vec<(VideoSequence, GroundTruth)> = (0..data.synthetic_clips)
            .into_par_iter()
            .map(|k| {
                let spec = JitterSpec {
                    seed: data.synthetic.seed.wrapping_add(k as u64),
                    ..data.synthetic.clone()
                };
                generate_jitter_video(&spec)
            })
            .collect::<Result<_>>()?;
        let mut clips = Vec::with_capacity(synthetic.len() + data.folders.len());
        for (k, (video, gt)) in synthetic.into_iter().enumerate() {
            if let Some(o) = oracle {
                gt.register(o, &video, k as u64)?;
            }
            clips.push(video);
        }
        for dir in &data.folders {
            clips.push(load_sequence(dir)?);
        }
        Ok(Self { clips })
    }

    /// `(clip, middle frame)` for every consecutive triplet.
    pub fn triplets(&self) -> Vec<(usize, usize)> {
        self.clips
            .iter()
            .enumerate()
            .flat_map(|(c, v)| (1..v.len().saturating_sub(1)).map(move |i| (c, i)))
            .collect()
    }
}

/// Deterministic per-example generator, independent of scheduling.
fn example_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Pseudo ground truth, crop, flip and warps for one triplet.
///
/// The shift is applied to the whole frame before cropping, so the patch of
/// `f_s` holds real content that lies outside the patch of `f_i`.
pub fn prepare_example(
    set: &TrainingSet,
    (clip, i): (usize, usize),
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    estimator: &dyn FlowEstimator,
) -> Result<TrainingExample> {
    let frames = set.clips[clip].frames();
    let (h, w, _) = frames[i].shape();
    let aug = Augmentation::draw(h, w, config.patch_size, config.flips, rng)?;
    let target = make_pseudo_gt(&frames[i], config.max_translation_fraction, rng)?;
    register_pseudo_gt(&frames[i], &target, estimator);
    let [prev, cur, next, f_s] =
        [&frames[i - 1], &frames[i], &frames[i + 1], &target.f_s].map(|f| aug.apply(f, estimator));
    warp_onto_target(&prev?, &cur?, &next?, &f_s?, &aug.apply_mask(&target.mask)?, estimator)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Runs the configured schedule, calling `on_step` after every step.
pub fn train(
    nets: &mut FusionNets<f32>,
    set: &TrainingSet,
    config: &TrainingConfig,
    extractor: &FeatureExtractor,
    estimator: &dyn FlowEstimator,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    let triplets = set.triplets();
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("training set has no frame triplets".into()));
    }
    let mut optimizer = Adam::new(nets, config.beta1, config.beta2, config.epsilon);
    let mut records = Vec::new();
    let mut step = 0;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        let mut order = triplets.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9)));
        let lr = config.learning_rate_at(epoch);
        for chunk in order.chunks(config.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<TrainingExample> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &t)| prepare_example(set, t, config, &mut example_rng(config.seed, step, slot), estimator))
                .collect::<Result<_>>()?;
            let loss = training_step(nets, &mut optimizer, &batch, lr, extractor, estimator)
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            let record = StepRecord {
                epoch,
                step,
                learning_rate: lr,
                loss,
            };
            on_step(&record);
            records.push(record);
            step += 1;
        }
    }
    Ok(records)
}

/// Loss log with columns `epoch,step,l1_out,perceptual_out,l1_int,perceptual_int,total`.
pub fn write_loss_csv(records: &[StepRecord], w: impl std::io::Write) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["epoch", "step", "l1_out", "perceptual_out", "l1_int", "perceptual_int", "total"])?;
    for r in records {
        csv.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss.l1_out.to_string(),
            r.loss.perceptual_out.to_string(),
            r.loss.l1_int.to_string(),
            r.loss.perceptual_int.to_string(),
            r.loss.total.to_string(),
        ])?;
    }
    csv.flush()
}

pub fn save_loss_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    write_atomic(path, |w| write_loss_csv(records, w))
}

/// Mean absolute difference over the pixels where `mask` is set.
pub fn masked_l1(a: &Frame, b: &Frame, mask: &Mask) -> Result<f64> {
    a.ensure_same_shape(b, "masked_l1")?;
    let c = a.channels();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            for k in 0..c {
                sum += (a.data()[i * c + k] - b.data()[i * c + k]).abs() as f64;
            }
            n += c;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Reconstruction of an example's pseudo ground truth through the same
/// path as test time (fusion, warp of `f_i` onto `f_int`, refinement).
pub fn reconstruct(fusion: &FusionMode, ex: &TrainingExample, estimator: &dyn FlowEstimator) -> Result<Frame> {
    let pair = crate::warp::HalfwayPair {
        minus: ex.minus.clone(),
        plus: ex.plus.clone(),
        mask_minus: ex.mask_minus.clone(),
        mask_plus: ex.mask_plus.clone(),
    };
    let f_int = fusion.intermediate(&pair)?;
    if fusion.is_bypass() {
        return Ok(f_int);
    }
    estimator.register_derived(&f_int, Provenance::AlignedWith(&ex.f_s));
    let flow = estimate_flow(estimator, &f_int, &ex.f_i)?;
    let (f_tilde, _) = backward_warp(&ex.f_i, &flow, 1.0)?;
    fusion.refine(&f_int, &f_tilde)
}

/// Mean masked L1 of the reconstructions against their targets.
pub fn reconstruction_l1(fusion: &FusionMode, examples: &[TrainingExample], estimator: &dyn FlowEstimator) -> Result<f64> {
    let errors: Vec<f64> = examples
        .par_iter()
        .map(|ex| masked_l1(&reconstruct(fusion, ex, estimator)?, &ex.f_s, &ex.mask_s))
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn schedule_decays_linearly() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.001);
        assert_eq!(cfg.learning_rate_at(99), 0.001);
        assert_eq!(cfg.learning_rate_at(100), 0.001);
        assert!((cfg.learning_rate_at(150) - 0.0005).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(200), 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainingConfig::default();
        assert!(ok.validate().is_ok());
        let text = ok.to_toml();
        assert_eq!(TrainingConfig::from_toml(&text).unwrap(), ok);
        for bad in [
            "max_translation_fraction = 0.5",
            "max_translation_fraction = 0.0",
            "decay_start = 200",
            "batch_size = 0",
            "patch_size = 30",
            "unknown_key = 1",
        ] {
            assert!(TrainingConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn pseudo_gt_shift_arithmetic() {
        let f = noise(32, 256, 1);
        let (same, mask) = pseudo_gt_with_shift(&f, (0.0, 0.0), 0.125).unwrap();
        assert_eq!(same, f);
        assert!(mask.all());
        let (shifted, mask) = pseudo_gt_with_shift(&f, (32.0, 0.0), 0.125).unwrap();
        for y in 0..32 {
            for x in 0..256 {
                assert_eq!(mask.get(y, x), x >= 32);
                if x >= 32 {
                    assert_eq!(shifted.pixel(y, x), f.pixel(y, x - 32));
                }
            }
        }
        assert!(pseudo_gt_with_shift(&f, (32.5, 0.0), 0.125).is_err());
    }

    #[test]
    fn loss_identities() {
        let ex = FeatureExtractor::fixed_random(3);
        let a = noise(32, 32, 2);
        let r = compute_losses(&a, &a, &a, None, &ex).unwrap();
        assert_eq!(r.total, 0.0);
        let zeros = Frame::zeros(32, 32, 3).unwrap();
        let ones = zeros.map(|_| 1.0);
        let r = compute_losses(&zeros, &zeros, &ones, None, &ex).unwrap();
        assert_eq!(r.l1_out, 1.0);
        assert!(r.perceptual_out > 0.0);
        assert_eq!(r.total, r.l1_out + r.perceptual_out + r.l1_int + r.perceptual_int);
        assert!(compute_losses(&a, &a, &noise(16, 32, 1), None, &ex).is_err());
    }

    #[test]
    fn extractor_is_frozen_and_deterministic() {
        let a = FeatureExtractor::fixed_random(9);
        let b = FeatureExtractor::fixed_random(9);
        let x = Tensor::from_frame(&noise(20, 24, 4));
        assert_eq!(a.features(&x), b.features(&x));
        assert_eq!(a.features(&x).c, 32);
        assert_eq!((a.features(&x).h, a.features(&x).w), (10, 12));
    }

    #[test]
    fn extractor_input_gradient_matches_differences() {
        let ex = FeatureExtractor::fixed_random(5);
        let pred = Tensor::from_frame(&noise(16, 16, 6));
        let target = Tensor::from_frame(&noise(16, 16, 7));
        let mut mask = Tensor::from_vec(1, 16, 16, vec![1.0; 256]);
        mask.data[5] = 0.0;
        let tf = ex.features(&apply_mask(&target, &mask));
        let (_, _, g) = loss_and_grad(&pred, &target, &tf, &mask, &ex, true);
        let g = g.unwrap();
        let f = |p: &Tensor<f32>| {
            let (l, q, _) = loss_and_grad(p, &target, &tf, &mask, &ex, false);
            l + q
        };
        for i in [0usize, 17, 60, 143, 300, 767] {
            let mut hi = pred.clone();
            hi.data[i] += 1e-3;
            let mut lo = pred.clone();
            lo.data[i] -= 1e-3;
            let numeric = (f(&hi) - f(&lo)) / 2e-3;
            assert!((numeric - g.data[i] as f64).abs() < 2e-3 + 0.05 * numeric.abs(), "{i}: {numeric} vs {}", g.data[i]);
        }
    }

    #[test]
    fn deep_extractor_names_and_pooling() {
        let ex = FeatureExtractor::deep_architecture();
        let mut names = Vec::new();
        ex.visit("", &mut |n, _, _| names.push(n));
        assert_eq!(names.first().unwrap(), "features.0.weight");
        assert_eq!(names.last().unwrap(), "features.23.bias");
        assert_eq!(names.len(), 22);
        let f = ex.features(&Tensor::from_frame(&noise(32, 32, 1)));
        assert_eq!((f.c, f.h, f.w), (512, 4, 4));
    }

    #[test]
    fn patch_targets_keep_content_from_outside_the_patch() {
        let oracle = AnalyticOracle::new();
        let data = DataConfig {
            synthetic_clips: 1,
            synthetic: JitterSpec {
                frames: 3,
                width: 96,
                height: 96,
                sigma: 1.0,
                ..JitterSpec::default()
            },
            folders: Vec::new(),
        };
        let set = TrainingSet::from_config(&data, Some(&oracle)).unwrap();
        let config = TrainingConfig {
            patch_size: 32,
            ..TrainingConfig::default()
        };
        let mut supervised_holes = 0;
        for k in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let ex = prepare_example(&set, (0, 1), &config, &mut rng, &oracle).unwrap();
            assert_eq!(ex.f_s.shape(), (32, 32, 3));
            let flow = estimate_flow(&oracle, &ex.f_s, &ex.f_i).unwrap();
            let (_, valid) = backward_warp(&ex.f_i, &flow, 1.0).unwrap();
            supervised_holes += valid.data().iter().zip(ex.mask_s.data()).filter(|&(&v, &s)| !v && s).count();
        }
        assert!(supervised_holes > 0);
    }

    #[test]
    fn adam_with_zero_rate_leaves_weights() {
        let mut nets = FusionNets::<f32>::new(FusionConfig { width: 8, ..FusionConfig::default() }, 1);
        let before = flatten(&nets);
        let mut opt = Adam::new(&nets, 0.9, 0.999, 1e-8);
        let grad = vec![0.3f32; before.len()];
        opt.step(&mut nets, &grad, 0.0);
        assert_eq!(flatten(&nets), before);
        opt.step(&mut nets, &grad, 1e-3);
        // The first bias-corrected Adam step moves every weight by lr.
        let after = flatten(&nets);
        assert!(after.iter().zip(&before).all(|(a, b)| ((b - a) - 1e-3).abs() < 1e-6));
    }
}
