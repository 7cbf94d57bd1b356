//! Frames, validity masks and video sequences.
//!
//! Pixels are stored interleaved and row-major (`y`, then `x`, then channel),
//! which is also the on-disk layout of the image sequences.

use std::hash::Hasher;

use crate::error::{Error, Result};

/// Smallest side accepted for a frame; the fusion U-Net downsamples twice
/// and the flow pyramid needs a few levels.
pub const MIN_SIDE: usize = 16;

#[derive(Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Dimensions(format!(
                "frame is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if channels == 0 {
            return Err(Error::Dimensions("frame needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimensions(format!(
                "{height}x{width}x{channels} frame needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame data".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Builds a frame from data already known to have the right length and
    /// finite values.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Frame, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimensions(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Bilinear sample at a continuous position. Writes one value per channel
    /// into `out` and returns false, leaving zeros, when the position lies
    /// outside `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn sample_bilinear(&self, x: f32, y: f32, out: &mut [f32]) -> bool {
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        // Tolerate rounding noise at the border.
        const EPS: f32 = 1e-4;
        if !(x >= -EPS && y >= -EPS && x <= max_x + EPS && y <= max_y + EPS) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let c = self.channels;
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        for (k, o) in out.iter_mut().enumerate().take(c) {
            let a = self.data[(row0 + x0) * c + k];
            let b = self.data[(row0 + x1) * c + k];
            let d = self.data[(row1 + x0) * c + k];
            let e = self.data[(row1 + x1) * c + k];
            let top = a + (b - a) * fx;
            let bottom = d + (e - d) * fx;
            *o = top + (bottom - top) * fy;
        }
        true
    }

    /// Luma in `[0, 1]`; single-channel frames are returned as is.
    pub fn to_gray(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|p| {
                if p.len() >= 3 {
                    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
                } else {
                    p.iter().sum::<f32>() / p.len() as f32
                }
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Frame {
        Frame::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn clamp01(&self) -> Frame {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f32 {
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn flip_horizontal(&self) -> Frame {
        let (h, w, c) = self.shape();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in (0..w).rev() {
                data.extend_from_slice(self.pixel(y, x));
            }
        }
        Frame::from_raw(h, w, c, data)
    }

    pub fn flip_vertical(&self) -> Frame {
        let (h, w, c) = self.shape();
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..h).rev() {
            let start = y * w * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Frame::from_raw(h, w, c, data)
    }

    /// Window of `height x width` pixels starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimensions(format!(
                "crop {height}x{width}+{left}+{top} exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Frame::new(height, width, c, data)
    }

    /// Content hash over shape and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        hasher.write_usize(self.height);
        hasher.write_usize(self.width);
        hasher.write_usize(self.channels);
        for v in &self.data {
            hasher.write_u32(v.to_bits());
        }
        hasher.finish()
    }
}

/// Per-pixel flag, true where a warp sampled inside the source frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimensions(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Mask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimensions(format!(
                "crop {height}x{width}+{left}+{top} exceeds {}x{} mask",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Mask::new(height, width, data)
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.push(self.get(y, x));
            }
        }
        Mask { data, ..*self }
    }

    pub fn flip_vertical(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        Mask { data, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    frames: Vec<Frame>,
    fps: f32,
}

pub const DEFAULT_FPS: f32 = 30.0;

impl VideoSequence {
    pub fn new(frames: Vec<Frame>, fps: f32) -> Result<Self> {
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate().skip(1) {
                if !f.same_shape(first) {
                    return Err(Error::Dimensions(format!(
                        "frame {i} is {:?}, frame 0 is {:?}",
                        f.shape(),
                        first.shape()
                    )));
                }
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    /// `(height, width, channels)` of every frame, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Frame::shape)
    }

    pub fn with_brightness_offset(&self, offset: f32) -> VideoSequence {
        VideoSequence {
            frames: self.frames.iter().map(|f| f.map(|v| v + offset)).collect(),
            fps: self.fps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Frame {
        Frame::from_fn(h, w, 1, |y, x, _| (x + 2 * y) as f32 / 100.0).unwrap()
    }

    #[test]
    fn rejects_small_and_inconsistent_frames() {
        assert!(Frame::zeros(8, 32, 3).is_err());
        assert!(Frame::new(16, 16, 3, vec![0.0; 10]).is_err());
        assert!(Frame::new(16, 16, 1, vec![f32::NAN; 256]).is_err());
    }

    #[test]
    fn bilinear_matches_plane() {
        let f = ramp(16, 16);
        let mut out = [0.0];
        assert!(f.sample_bilinear(3.25, 4.5, &mut out));
        assert!((out[0] - (3.25 + 9.0) / 100.0).abs() < 1e-6);
        assert!(!f.sample_bilinear(15.5, 2.0, &mut out));
        assert_eq!(out[0], 0.0);
        assert!(f.sample_bilinear(15.0, 15.0, &mut out));
    }

    #[test]
    fn flips_are_involutions() {
        let f = ramp(16, 20);
        assert_eq!(f.flip_horizontal().flip_horizontal(), f);
        assert_eq!(f.flip_vertical().flip_vertical(), f);
        assert_eq!(f.flip_horizontal().get(0, 0, 0), f.get(0, 19, 0));
    }

    #[test]
    fn crop_and_fingerprint() {
        let f = ramp(32, 32);
        let c = f.crop(4, 8, 16, 16).unwrap();
        assert_eq!(c.get(0, 0, 0), f.get(4, 8, 0));
        assert!(f.crop(20, 0, 16, 16).is_err());
        assert_eq!(f.fingerprint(), f.clone().fingerprint());
        assert_ne!(f.fingerprint(), f.map(|v| v + 1e-6).fingerprint());
    }

    #[test]
    fn sequence_requires_uniform_shape() {
        let a = Frame::zeros(16, 16, 3).unwrap();
        let b = Frame::zeros(16, 32, 3).unwrap();
        assert!(VideoSequence::new(vec![a.clone(), a.clone()], 30.0).is_ok());
        assert!(VideoSequence::new(vec![a, b], 30.0).is_err());
    }
}
