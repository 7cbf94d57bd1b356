//! Shaky-video generator with exact ground truth, and the trajectory-level
//! reference for what iterated midpoint synthesis does to a camera path.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::AnalyticOracle;
use crate::frame::{Frame, Mask, VideoSequence};
use crate::geometry::{frame_center, Affine2};
use crate::io::load_frame;
use crate::stabilizer::effective_skip;
use crate::trajectory::TrajectorySignal;

/// A disk moving across the scene with its own texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub radius: f64,
    /// Center in frame-0 pixel coordinates.
    pub start: [f64; 2],
    /// Scene-space motion per frame, pixels.
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub fps: f32,
    pub seed: u64,
    /// Standard deviation of the per-frame translation jitter, pixels.
    pub sigma: f64,
    /// Standard deviation of the per-frame rotation jitter, degrees.
    pub rotation_sigma_deg: f64,
    /// When nonzero, only DFT bins `k` with `min_bin <= k <= n - min_bin`
    /// of the jitter are kept (then rescaled to `sigma`).
    pub jitter_min_bin: usize,
    /// Linear camera pan, pixels per frame.
    pub pan: [f64; 2],
    /// Coarsest feature size of the procedural texture, pixels.
    pub texture_scale: f64,
    /// Source image; procedural texture when absent.
    pub source: Option<PathBuf>,
    pub sprite: Option<SpriteSpec>,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            frames: 64,
            width: 320,
            height: 180,
            channels: 3,
            fps: 30.0,
            seed: 0,
            sigma: 4.0,
            rotation_sigma_deg: 0.0,
            jitter_min_bin: 0,
            pan: [0.0, 0.0],
            texture_scale: 24.0,
            source: None,
            sprite: None,
        }
    }
}

impl JitterSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.width < crate::frame::MIN_SIDE || self.height < crate::frame::MIN_SIDE {
            return bad(format!("frames must be at least {0}x{0}", crate::frame::MIN_SIDE));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3".into());
        }
        let finite = [self.sigma, self.rotation_sigma_deg, self.pan[0], self.pan[1], self.texture_scale];
        if finite.iter().any(|v| !v.is_finite()) || self.sigma < 0.0 || self.rotation_sigma_deg < 0.0 {
            return bad("jitter amplitudes must be finite and nonnegative".into());
        }
        if self.texture_scale < 2.0 {
            return bad("texture_scale must be at least 2 pixels".into());
        }
        if self.jitter_min_bin > self.frames / 2 {
            return bad(format!("jitter_min_bin {} exceeds the Nyquist bin", self.jitter_min_bin));
        }
        if let Some(s) = &self.sprite {
            if !(s.radius > 0.0) || s.start.iter().chain(&s.velocity).any(|v| !v.is_finite()) {
                return bad("sprite needs a positive radius and finite motion".into());
            }
        }
        Ok(())
    }
}

/// Exact description of a generated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `A_i` with `frame_i(p) = source(A_i p)`.
    pub poses: Vec<Affine2>,
    pub trajectory: TrajectorySignal,
    pub center: (f64, f64),
}

impl GroundTruth {
    pub fn from_poses(poses: Vec<Affine2>, center: (f64, f64)) -> Self {
        let path: Vec<Affine2> = poses
            .iter()
            .map(|a| a.inverse().expect("camera poses are invertible") * poses[0])
            .collect();
        let trajectory = TrajectorySignal::from_transforms(&path, center);
        Self {
            poses,
            trajectory,
            center,
        }
    }

    /// Poses in frame-0 coordinates (`A_0^-1 A_i`).
    pub fn relative_poses(&self) -> Vec<Affine2> {
        let inv0 = self.poses[0].inverse().expect("camera poses are invertible");
        self.poses.iter().map(|a| inv0 * *a).collect()
    }

    /// Transform taking frame `i` coordinates to frame `i + 1` coordinates.
    pub fn pair_transforms(&self) -> Vec<Affine2> {
        self.poses
            .windows(2)
            .map(|w| w[1].inverse().expect("camera poses are invertible") * w[0])
            .collect()
    }

    pub fn register(&self, oracle: &AnalyticOracle, video: &VideoSequence, scene: u64) -> Result<()> {
        oracle.register_all(video.frames(), scene, &self.poses)
    }
}

/// Registers frames with the oracle using only a trajectory (for example
/// one read back from CSV). Poses are expressed in frame-0 coordinates.
pub fn register_trajectory(
    oracle: &AnalyticOracle,
    video: &VideoSequence,
    trajectory: &TrajectorySignal,
    scene: u64,
) -> Result<()> {
    let (h, w, _) = video
        .shape()
        .ok_or_else(|| Error::InvalidArgument("empty video".into()))?;
    if trajectory.len() != video.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} samples for {} frames",
            trajectory.len(),
            video.len()
        )));
    }
    let poses: Vec<Affine2> = trajectory
        .to_transforms(frame_center(h, w))
        .iter()
        .map(|m| m.inverse().expect("rigid transforms are invertible"))
        .collect();
    oracle.register_all(video.frames(), scene, &poses)
}

/// Keeps DFT bins `min_bin..=n-min_bin` of a real signal.
pub fn band_limit(signal: &[f64], min_bin: usize) -> Vec<f64> {
    let n = signal.len();
    if min_bin == 0 || n == 0 {
        return signal.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if k < min_bin || k > n - min_bin {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn rescale_std(signal: &mut [f64], target: f64) {
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let std = (signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        signal.iter_mut().for_each(|v| *v = (*v - mean) * target / std);
    }
}

fn draw_jitter(spec: &JitterSpec, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let n = spec.frames;
    let sigmas = [spec.sigma, spec.sigma, spec.rotation_sigma_deg.to_radians()];
    let mut out: [Vec<f64>; 3] = Default::default();
    for (signal, &s) in out.iter_mut().zip(&sigmas) {
        *signal = if s > 0.0 {
            let normal = Normal::new(0.0, s).expect("valid sigma");
            (0..n).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        if spec.jitter_min_bin > 0 && s > 0.0 {
            *signal = band_limit(signal, spec.jitter_min_bin);
            rescale_std(signal, s);
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise, each channel normalized to [0.1, 0.9].
pub fn procedural_texture(height: usize, width: usize, channels: usize, scale: f64, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874_7572_6500);
    let mut data = vec![0.0f64; height * width * channels];
    let mut cell = scale;
    let mut weight = 1.0;
    while cell >= 2.0 {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        for c in 0..channels {
            let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
            for y in 0..height {
                let fy = y as f64 / cell;
                let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
                for x in 0..width {
                    let fx = x as f64 / cell;
                    let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                    let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
                    let bottom = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
                    data[(y * width + x) * channels + c] += weight * (top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        cell /= 2.0;
        weight *= 0.55;
    }
    for c in 0..channels {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in data.iter().skip(c).step_by(channels) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let span = (hi - lo).max(1e-12);
        for v in data.iter_mut().skip(c).step_by(channels) {
            *v = 0.1 + 0.8 * (*v - lo) / span;
        }
    }
    Frame::new(height, width, channels, data.into_iter().map(|v| v as f32).collect()).expect("valid texture")
}

/// `frame(p) = source(pose p)` on an `height x width` grid.
pub fn render_view(source: &Frame, pose: &Affine2, height: usize, width: usize) -> Result<(Frame, Mask)> {
    let c = source.channels();
    let mut data = vec![0.0f32; height * width * c];
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = pose.apply(x as f64, y as f64);
            let i = y * width + x;
            mask.push(source.sample_bilinear(sx as f32, sy as f32, &mut data[i * c..(i + 1) * c]));
        }
    }
    Ok((Frame::new(height, width, c, data)?, Mask::new(height, width, mask)?))
}

fn corners(spec: &JitterSpec, pose: &Affine2) -> [(f64, f64); 4] {
    let (w, h) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)].map(|(x, y)| pose.apply(x, y))
}

fn sprite_color(dx: f64, dy: f64, c: usize) -> f32 {
    let phase = c as f64 * 2.1;
    (0.5 + 0.45 * (dx * 0.55 + phase).sin() * (dy * 0.55 - phase).cos()) as f32
}

/// Renders the clip described by `spec`.
pub fn generate_jitter_video(spec: &JitterSpec) -> Result<(VideoSequence, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [jx, jy, jt] = draw_jitter(spec, &mut rng);
    let center = frame_center(spec.height, spec.width);
    let camera = |i: usize, origin: (f64, f64)| {
        Affine2::similarity_about(
            center,
            jt[i],
            1.0,
            origin.0 + spec.pan[0] * i as f64 + jx[i],
            origin.1 + spec.pan[1] * i as f64 + jy[i],
        )
    };

    let (source, origin) = match &spec.source {
        None => {
            let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
            for i in 0..spec.frames {
                for (x, y) in corners(spec, &camera(i, (0.0, 0.0))) {
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x), hi.1.max(y));
                }
            }
            let margin = 2.0;
            let origin = (margin - lo.0, margin - lo.1);
            let sw = (hi.0 - lo.0 + 2.0 * margin).ceil() as usize + 1;
            let sh = (hi.1 - lo.1 + 2.0 * margin).ceil() as usize + 1;
            let tex = procedural_texture(sh, sw, spec.channels, spec.texture_scale, spec.seed);
            (tex, origin)
        }
        Some(path) => {
            let img = load_frame(path)?;
            if img.channels() != spec.channels {
                return Err(Error::Config(format!(
                    "{} has {} channels, spec asks for {}",
                    path.display(),
                    img.channels(),
                    spec.channels
                )));
            }
            // Center the mean window in the image.
            let mid = (spec.frames as f64 - 1.0) / 2.0;
            let origin = (
                (img.width() as f64 - spec.width as f64) / 2.0 - spec.pan[0] * mid,
                (img.height() as f64 - spec.height as f64) / 2.0 - spec.pan[1] * mid,
            );
            (img, origin)
        }
    };

    let poses: Vec<Affine2> = (0..spec.frames).map(|i| camera(i, origin)).collect();
    let (sw, sh) = ((source.width() - 1) as f64, (source.height() - 1) as f64);
    for (i, pose) in poses.iter().enumerate() {
        for (x, y) in corners(spec, pose) {
            if x < 0.0 || y < 0.0 || x > sw || y > sh {
                return Err(Error::Config(format!(
                    "frame {i}: crop window leaves the {}x{} source (corner at {x:.1}, {y:.1})",
                    source.width(),
                    source.height()
                )));
            }
        }
    }

    let sprite = spec.sprite.as_ref().map(|s| {
        let start = poses[0].apply(s.start[0], s.start[1]);
        (start, s)
    });
    let frames: Vec<Frame> = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let pose = &poses[i];
            let c = spec.channels;
            let mut data = vec![0.0f32; spec.height * spec.width * c];
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let (sx, sy) = pose.apply(x as f64, y as f64);
                    let px = &mut data[(y * spec.width + x) * c..(y * spec.width + x + 1) * c];
                    source.sample_bilinear(sx as f32, sy as f32, px);
                    if let Some(((x0, y0), s)) = sprite {
                        let (dx, dy) = (sx - x0 - s.velocity[0] * i as f64, sy - y0 - s.velocity[1] * i as f64);
                        let alpha = (s.radius + 0.5 - dx.hypot(dy)).clamp(0.0, 1.0) as f32;
                        if alpha > 0.0 {
                            for (k, v) in px.iter_mut().enumerate() {
                                *v = *v * (1.0 - alpha) + alpha * sprite_color(dx, dy, k);
                            }
                        }
                    }
                }
            }
            Frame::new(spec.height, spec.width, c, data)
        })
        .collect::<Result<_>>()?;
    let video = VideoSequence::new(frames, spec.fps)?;
    Ok((video, GroundTruth::from_poses(poses, center)))
}

/// One signal through `iterations` Jacobi midpoint passes.
pub fn midpoint_filter(signal: &[f64], iterations: usize, skip: usize) -> Vec<f64> {
    let n = signal.len();
    let mut cur = signal.to_vec();
    for _ in 0..iterations {
        cur = (0..n)
            .map(|i| {
                let s = effective_skip(i, n, skip);
                if s == 0 {
                    cur[i]
                } else {
                    (cur[i - s] + cur[i + s]) / 2.0
                }
            })
            .collect();
    }
    cur
}

/// What the stabilizer does to a trajectory when every synthesized frame
/// sits exactly at the midpoint of its two inputs.
pub fn midpoint_filter_reference(traj: &TrajectorySignal, iterations: usize, skip: usize) -> TrajectorySignal {
    traj.map_signals(|s| midpoint_filter(s, iterations, skip))
}

/// Interior gain `|cos(skip * w)|^iterations` sampled at `samples` evenly
/// spaced angular frequencies in `[0, pi]`.
pub fn filter_response_curve(skip: usize, iterations: usize, samples: usize) -> Vec<(f64, f64)> {
    let samples = samples.max(2);
    (0..samples)
        .map(|k| {
            let w = std::f64::consts::PI * k as f64 / (samples - 1) as f64;
            (w, response_gain(w, skip, iterations))
        })
        .collect()
}

pub fn response_gain(omega: f64, skip: usize, iterations: usize) -> f64 {
    (skip as f64 * omega).cos().abs().powi(iterations as i32)
}

pub fn write_response_csv(curve: &[(f64, f64)], w: impl std::io::Write) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["frequency", "gain"])?;
    for (f, g) in curve {
        csv.write_record([f.to_string(), g.to_string()])?;
    }
    csv.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sigma: f64) -> JitterSpec {
        JitterSpec {
            frames: 16,
            width: 48,
            height: 32,
            sigma,
            seed: 3,
            ..JitterSpec::default()
        }
    }

    #[test]
    fn zero_jitter_static_camera_repeats_the_frame() {
        let (v, gt) = generate_jitter_video(&small(0.0)).unwrap();
        assert!(v.frames().iter().all(|f| *f == v.frames()[0]));
        assert!(gt.trajectory.tx.iter().chain(&gt.trajectory.ty).all(|&t| t == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = JitterSpec {
            rotation_sigma_deg: 0.5,
            ..small(4.0)
        };
        let (a, ga) = generate_jitter_video(&spec).unwrap();
        let (b, gb) = generate_jitter_video(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate_jitter_video(&JitterSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frames_match_their_poses() {
        let spec = JitterSpec {
            rotation_sigma_deg: 1.0,
            pan: [0.5, -0.25],
            ..small(3.0)
        };
        let (v, gt) = generate_jitter_video(&spec).unwrap();
        // Frame i seen from frame 0: frame_i(p) = frame_0(A_0^-1 A_i p).
        let rel = gt.relative_poses();
        for i in [5, 11] {
            let (view, mask) = render_view(&v.frames()[0], &rel[i], 32, 48).unwrap();
            let mut worst: f32 = 0.0;
            for y in 2..30 {
                for x in 2..46 {
                    if mask.get(y, x) {
                        for c in 0..3 {
                            worst = worst.max((view.get(y, x, c) - v.frames()[i].get(y, x, c)).abs());
                        }
                    }
                }
            }
            // Double bilinear resampling of band-limited texture.
            assert!(worst < 0.06, "frame {i}: {worst}");
        }
    }

    #[test]
    fn trajectory_is_relative_to_frame_zero() {
        let spec = JitterSpec {
            pan: [1.0, 0.0],
            ..small(0.0)
        };
        let (_, gt) = generate_jitter_video(&spec).unwrap();
        for i in 0..spec.frames {
            // Panning right moves content left.
            assert!((gt.trajectory.tx[i] + i as f64).abs() < 1e-9);
            assert!(gt.trajectory.ty[i].abs() < 1e-9);
        }
    }

    #[test]
    fn user_source_must_contain_every_window() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.png");
        crate::io::save_frame(&procedural_texture(40, 60, 3, 8.0, 1), &path).unwrap();
        let spec = JitterSpec {
            source: Some(path.clone()),
            ..small(1.0)
        };
        assert!(generate_jitter_video(&spec).is_ok());
        let err = generate_jitter_video(&JitterSpec { sigma: 30.0, ..spec }).unwrap_err();
        assert!(err.to_string().contains("crop window"), "{err}");
    }

    #[test]
    fn band_limited_jitter_has_no_low_bins() {
        let spec = JitterSpec {
            frames: 64,
            jitter_min_bin: 7,
            ..small(4.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [jx, _, _] = draw_jitter(&spec, &mut rng);
        let mut buf: Vec<Complex<f64>> = jx.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(64).process(&mut buf);
        for c in buf.iter().take(7) {
            assert!(c.norm() < 1e-9);
        }
        let std = (jx.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!((std - 4.0).abs() < 1e-9);
    }

    #[test]
    fn midpoint_filter_examples() {
        // The center sample is replaced by the mean of its neighbors.
        assert_eq!(midpoint_filter(&[0.0, 2.0, 0.0], 1, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(midpoint_filter(&[1.0, 5.0, 3.0], 1, 1), vec![1.0, 2.0, 3.0]);
        assert_eq!(midpoint_filter(&[0.0, 4.0, 8.0, 0.0, 2.0], 1, 2), vec![0.0, 4.0, 1.0, 5.0, 2.0]);
        let flat = vec![3.5; 20];
        for (k, s) in [(1, 1), (5, 2), (3, 3)] {
            assert_eq!(midpoint_filter(&flat, k, s), flat);
        }
    }

    #[test]
    fn midpoint_filter_scales_sinusoids_by_cosine() {
        let n = 200;
        for (s, w) in [(1usize, 0.3f64), (2, 0.45), (3, 0.2)] {
            let x: Vec<f64> = (0..n).map(|i| (w * i as f64 + 0.4).sin()).collect();
            let y = midpoint_filter(&x, 1, s);
            let g = (s as f64 * w).cos();
            for i in s..n - s {
                assert!((y[i] - g * x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn response_curve_values() {
        use std::f64::consts::PI;
        assert_eq!(response_gain(0.0, 2, 5), 1.0);
        assert!((response_gain(PI, 1, 1) - 1.0).abs() < 1e-12);
        assert!(response_gain(PI / 4.0, 2, 5) < 1e-12);
        let curve = filter_response_curve(2, 5, 9);
        assert_eq!(curve.len(), 9);
        assert!(curve[2].1 < 1e-12);
        let mut out = Vec::new();
        write_response_csv(&curve, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("frequency,gain\n0,1\n"));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = JitterSpec {
            sprite: Some(SpriteSpec {
                radius: 6.0,
                start: [10.0, 12.0],
                velocity: [1.0, 0.5],
            }),
            ..small(2.0)
        };
        assert_eq!(JitterSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(JitterSpec::from_toml("frames = 8\nbogus = 1\n").is_err());
        assert!(JitterSpec::from_toml("width = 8\n").is_err());
    }
}
