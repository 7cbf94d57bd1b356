//! Iterative midpoint synthesis over a whole video.
//!
//! Each pass replaces frame `i` by a frame synthesized from the previous
//! pass's frames `i - s` and `i + s` and the untouched original `i`. Passes
//! are double-buffered, so frames within a pass can be computed in any order
//! or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowEstimator, Provenance};
use crate::frame::{Frame, VideoSequence};
use crate::nn::FusionMode;
use crate::warp::{backward_warp, halfway_pair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilizeConfig {
    pub iterations: usize,
    pub skip: usize,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self { iterations: 5, skip: 2 }
    }
}

/// Neighbor offset used for frame `i`: the requested skip, shrunk so both
/// neighbors exist. Zero means the frame is copied.
pub fn effective_skip(i: usize, n: usize, skip: usize) -> usize {
    debug_assert!(i < n);
    skip.min(i).min(n - 1 - i)
}

/// Middle frame between `prev` and `next`, refined with the original frame.
pub fn synthesize_frame(
    prev: &Frame,
    orig: &Frame,
    next: &Frame,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
) -> Result<Frame> {
    prev.ensure_same_shape(orig, "synthesize_frame")?;
    prev.ensure_same_shape(next, "synthesize_frame")?;
    let pair = halfway_pair(estimator, prev, next)?;
    let f_int = fusion.intermediate(&pair)?;
    estimator.register_derived(&f_int, Provenance::Midpoint(prev, next));
    if fusion.is_bypass() {
        return Ok(f_int);
    }
    let flow = estimate_flow(estimator, &f_int, orig)?;
    let (f_tilde, _) = backward_warp(orig, &flow, 1.0)?;
    let f_hat = fusion.refine(&f_int, &f_tilde)?;
    estimator.register_derived(&f_hat, Provenance::AlignedWith(&f_int));
    Ok(f_hat)
}

fn synthesize_at(
    i: usize,
    previous: &[Frame],
    originals: &[Frame],
    skip: usize,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
) -> Result<Frame> {
    let s = effective_skip(i, previous.len(), skip);
    if s == 0 {
        return Ok(previous[i].clone());
    }
    synthesize_frame(&previous[i - s], &originals[i], &previous[i + s], fusion, estimator)
}

fn check_pass_inputs(previous: &[Frame], originals: &[Frame], skip: usize) -> Result<()> {
    if previous.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: previous.len(),
        });
    }
    if previous.len() != originals.len() {
        return Err(Error::Dimensions(format!(
            "{} frames in the pass buffer but {} originals",
            previous.len(),
            originals.len()
        )));
    }
    if skip == 0 {
        return Err(Error::InvalidArgument("skip must be at least 1".into()));
    }
    Ok(())
}

/// One Jacobi pass, frames computed in parallel on the current rayon pool.
pub fn iteration_pass(
    previous: &[Frame],
    originals: &[Frame],
    skip: usize,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
) -> Result<Vec<Frame>> {
    check_pass_inputs(previous, originals, skip)?;
    (0..previous.len())
        .into_par_iter()
        .map(|i| synthesize_at(i, previous, originals, skip, fusion, estimator))
        .collect()
}

/// Same as [`iteration_pass`] but sequential, visiting frames in `order`
/// (a permutation of `0..n`).
pub fn iteration_pass_in_order(
    previous: &[Frame],
    originals: &[Frame],
    skip: usize,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
    order: &[usize],
) -> Result<Vec<Frame>> {
    check_pass_inputs(previous, originals, skip)?;
    let mut out: Vec<Option<Frame>> = vec![None; previous.len()];
    for &i in order {
        out[i] = Some(synthesize_at(i, previous, originals, skip, fusion, estimator)?);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::InvalidArgument(format!("order never visits frame {i}"))))
        .collect()
}

pub fn stabilize(
    video: &VideoSequence,
    config: &StabilizeConfig,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
) -> Result<VideoSequence> {
    stabilize_with_progress(video, config, fusion, estimator, &|_, _| {})
}

/// [`stabilize`], calling `progress(pass, total)` after every finished pass.
pub fn stabilize_with_progress(
    video: &VideoSequence,
    config: &StabilizeConfig,
    fusion: &FusionMode,
    estimator: &dyn FlowEstimator,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<VideoSequence> {
    if video.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: video.len(),
        });
    }
    let originals = video.frames();
    let mut current = originals.to_vec();
    for pass in 0..config.iterations {
        current = iteration_pass(&current, originals, config.skip, fusion, estimator)?;
        progress(pass + 1, config.iterations);
    }
    VideoSequence::new(current, video.fps())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::AnalyticOracle;
    use crate::geometry::Affine2;

    #[test]
    fn effective_skip_boundaries() {
        assert_eq!(effective_skip(0, 100, 2), 0);
        assert_eq!(effective_skip(1, 100, 2), 1);
        assert_eq!(effective_skip(50, 100, 2), 2);
        assert_eq!(effective_skip(99, 100, 2), 0);
        assert_eq!(effective_skip(98, 100, 2), 1);
        assert_eq!(effective_skip(2, 5, 2), 2);
        assert_eq!(effective_skip(1, 5, 2), 1);
        assert_eq!(effective_skip(3, 5, 2), 1);
    }

    fn shifted(tx: f64) -> Frame {
        Frame::from_fn(24, 32, 3, |y, x, c| {
            let xf = x as f64 - tx;
            (0.5 + 0.25 * (xf * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos()) as f32
        })
        .unwrap()
    }

    fn oracle_clip(offsets: &[f64]) -> (AnalyticOracle, VideoSequence) {
        let o = AnalyticOracle::new();
        let frames: Vec<Frame> = offsets.iter().map(|&t| shifted(t)).collect();
        for (f, &t) in frames.iter().zip(offsets) {
            o.register(f, 0, Affine2::translation(-t, 0.0));
        }
        (o, VideoSequence::new(frames, 30.0).unwrap())
    }

    #[test]
    fn boundary_frames_are_copied() {
        let (o, v) = oracle_clip(&[0.0, 3.0, 0.0]);
        let out = iteration_pass(v.frames(), v.frames(), 1, &FusionMode::Bypass, &o).unwrap();
        assert_eq!(out[0], v.frames()[0]);
        assert_eq!(out[2], v.frames()[2]);
        assert_ne!(out[1], v.frames()[1]);
        assert_eq!(o.pose_of(&out[1]).unwrap().1.max_abs_diff(&Affine2::IDENTITY), 0.0);
    }

    #[test]
    fn skip_two_uses_outer_neighbors() {
        let (o, v) = oracle_clip(&[0.0, 1.0, 4.0, 3.0, 2.0]);
        let out = iteration_pass(v.frames(), v.frames(), 2, &FusionMode::Bypass, &o).unwrap();
        let tx = |f: &Frame| -o.pose_of(f).unwrap().1.m[0][2];
        assert!((tx(&out[2]) - 1.0).abs() < 1e-12);
        assert!((tx(&out[1]) - 2.0).abs() < 1e-12);
        assert!((tx(&out[3]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_identity_and_short_videos_fail() {
        let (o, v) = oracle_clip(&[0.0, 2.0, 1.0, 0.5]);
        let cfg = StabilizeConfig { iterations: 0, skip: 2 };
        assert_eq!(stabilize(&v, &cfg, &FusionMode::Bypass, &o).unwrap(), v);
        let (o, short) = oracle_clip(&[0.0, 1.0]);
        assert!(matches!(
            stabilize(&short, &StabilizeConfig::default(), &FusionMode::Bypass, &o),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn pass_order_does_not_matter() {
        let (o, v) = oracle_clip(&[0.0, 2.0, -1.5, 3.0, 0.5, 1.0, -2.0]);
        let forward: Vec<usize> = (0..7).collect();
        let backward: Vec<usize> = (0..7).rev().collect();
        let shuffled = [3, 0, 6, 1, 5, 2, 4];
        let a = iteration_pass_in_order(v.frames(), v.frames(), 2, &FusionMode::Bypass, &o, &forward).unwrap();
        let b = iteration_pass_in_order(v.frames(), v.frames(), 2, &FusionMode::Bypass, &o, &backward).unwrap();
        let c = iteration_pass_in_order(v.frames(), v.frames(), 2, &FusionMode::Bypass, &o, &shuffled).unwrap();
        let d = iteration_pass(v.frames(), v.frames(), 2, &FusionMode::Bypass, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a, d);
    }

    #[test]
    fn originals_are_untouched() {
        let (o, v) = oracle_clip(&[0.0, 2.0, -1.0, 1.0, 0.0]);
        let before = v.clone();
        let out = stabilize(&v, &StabilizeConfig { iterations: 3, skip: 1 }, &FusionMode::Bypass, &o).unwrap();
        assert_eq!(v, before);
        assert_eq!(out.len(), v.len());
        assert_eq!(out.shape(), v.shape());
    }
}
