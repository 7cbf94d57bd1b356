//! Cropping ratio, distortion value and stability score, plus the
//! flow-based homography fitting they rest on.

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowEstimator};
use crate::frame::{Frame, VideoSequence};
use crate::geometry::frame_center;
use crate::trajectory::TrajectorySignal;

/// Fitting parameters. Defaults: 32x32 correspondence grid, 1.5 px inlier
/// threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub grid: usize,
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Fits whose matrix condition number exceeds this are rejected.
    pub max_condition: f64,
    /// Minimum share of correspondences that must be inliers.
    pub min_inlier_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: 32,
            threshold: 1.5,
            iterations: 500,
            seed: 0x5eed,
            max_condition: 1e7,
            min_inlier_fraction: 0.25,
        }
    }
}

/// Projective map normalized so that `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    fn from_matrix(h: &Matrix3<f64>) -> Option<Self> {
        let s = h[(2, 2)];
        if s.abs() < 1e-12 || !s.is_finite() {
            return None;
        }
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h[(r, c)] / s;
            }
        }
        Some(Self { m })
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    /// `(self * rhs)(p) = self(rhs(p))`.
    pub fn compose(&self, rhs: &Homography) -> Homography {
        Homography::from_matrix(&(self.matrix() * rhs.matrix())).unwrap_or(Homography::IDENTITY)
    }

    /// Upper-left 2x2 block `[[a, b], [c, d]]`.
    pub fn affine_block(&self) -> [[f64; 2]; 2] {
        [[self.m[0][0], self.m[0][1]], [self.m[1][0], self.m[1][1]]]
    }

    /// Mean of the two singular values of the affine block.
    pub fn scale(&self) -> f64 {
        let [[a, b], [c, d]] = self.affine_block();
        let sum_sq = a * a + b * b + c * c + d * d;
        let det = (a * d - b * c).abs();
        // s1^2 + s2^2 = |A|_F^2 and s1 s2 = |det A|.
        let s1_plus_s2 = (sum_sq + 2.0 * det).max(0.0).sqrt();
        s1_plus_s2 / 2.0
    }

    /// `min |lambda| / max |lambda|` over the eigenvalues of the affine block.
    pub fn distortion(&self) -> f64 {
        let [[a, b], [c, d]] = self.affine_block();
        let (tr, det) = (a + d, a * d - b * c);
        let disc = tr * tr / 4.0 - det;
        if disc < 0.0 {
            return 1.0;
        }
        let r = disc.sqrt();
        let (l1, l2) = ((tr / 2.0 + r).abs(), (tr / 2.0 - r).abs());
        let hi = l1.max(l2);
        if hi == 0.0 {
            0.0
        } else {
            l1.min(l2) / hi
        }
    }

    pub fn angle(&self) -> f64 {
        let [[a, b], [c, d]] = self.affine_block();
        (c - b).atan2(a + d)
    }

    pub fn condition(&self) -> f64 {
        let sv = self.matrix().singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Result of a single robust fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub homography: Homography,
    pub inliers: usize,
    pub correspondences: usize,
}

/// Similarity taking points to zero mean and mean distance sqrt(2).
fn normalizer(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = points.iter().map(|p| (p.0 - mx).hypot(p.1 - my)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalized direct linear transform over all given correspondences.
fn dlt(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Homography> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let (ts, td) = (normalizer(src), normalizer(dst));
    // Accumulate A^T A (9x9) directly; the null vector is its smallest
    // eigenvector.
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = transform(&ts, *p);
        let (u, v) = transform(&td, *q);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for row in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += row[i] * row[j];
                }
            }
        }
    }
    let eig = ata.symmetric_eigen();
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse()?;
    Homography::from_matrix(&(td_inv * hn * ts))
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs() < 1.0
}

fn reprojection_error(h: &Homography, p: (f64, f64), q: (f64, f64)) -> f64 {
    let (x, y) = h.apply(p.0, p.1);
    let e = (x - q.0).hypot(y - q.1);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Robust homography from point correspondences (random-sample consensus
/// over 4-point fits, then least-squares refits on the inliers).
pub fn fit_correspondences(src: &[(f64, f64)], dst: &[(f64, f64)], opts: &FitOptions) -> Result<Fit> {
    let n = src.len();
    if n < 8 {
        return Err(Error::Degenerate(format!("only {n} correspondences")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let count = |h: &Homography| {
        src.iter()
            .zip(dst)
            .filter(|(p, q)| reprojection_error(h, **p, **q) < opts.threshold)
            .count()
    };
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..opts.iterations {
        let mut idx = [0usize; 4];
        for k in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !idx[..k].contains(&c) {
                    idx[k] = c;
                    break;
                }
            }
        }
        let s: Vec<(f64, f64)> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<(f64, f64)> = idx.iter().map(|&i| dst[i]).collect();
        let degenerate = (0..4).any(|skip| {
            let pts: Vec<(f64, f64)> = (0..4).filter(|&i| i != skip).map(|i| s[i]).collect();
            collinear(pts[0], pts[1], pts[2])
        });
        if degenerate {
            continue;
        }
        let Some(h) = dlt(&s, &d) else { continue };
        let c = count(&h);
        if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
            best = Some((c, h));
        }
    }
    let Some((_, mut h)) = best else {
        return Err(Error::Degenerate("no non-degenerate sample".into()));
    };
    for _ in 0..3 {
        let (s, d): (Vec<_>, Vec<_>) = src
            .iter()
            .zip(dst)
            .filter(|(p, q)| reprojection_error(&h, **p, **q) < opts.threshold)
            .map(|(p, q)| (*p, *q))
            .unzip();
        if s.len() < 8 {
            break;
        }
        h = dlt(&s, &d).ok_or_else(|| Error::Degenerate("inlier refit failed".into()))?;
    }
    let inliers = count(&h);
    if (inliers as f64) < opts.min_inlier_fraction * n as f64 || inliers < 8 {
        return Err(Error::Degenerate(format!("{inliers} of {n} correspondences agree")));
    }
    if h.condition() > opts.max_condition {
        return Err(Error::Degenerate(format!("condition number {:.3e}", h.condition())));
    }
    Ok(Fit {
        homography: h,
        inliers,
        correspondences: n,
    })
}

/// Homography taking `a`'s pixel coordinates to `b`'s, from the flow
/// `a -> b` sampled on a uniform grid.
pub fn fit_homography(a: &Frame, b: &Frame, estimator: &dyn FlowEstimator, opts: &FitOptions) -> Result<Fit> {
    let flow = estimate_flow(estimator, a, b)?;
    let (h, w) = (a.height(), a.width());
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let mut src = Vec::with_capacity(opts.grid * opts.grid);
    let mut dst = Vec::with_capacity(opts.grid * opts.grid);
    for gy in 0..opts.grid {
        for gx in 0..opts.grid {
            let x = (((gx as f64 + 0.5) * w as f64 / opts.grid as f64) as usize).min(w - 1);
            let y = (((gy as f64 + 0.5) * h as f64 / opts.grid as f64) as usize).min(h - 1);
            let (u, v) = flow.at(y, x);
            let q = (x as f64 + u as f64, y as f64 + v as f64);
            // Points that leave `b` have no observable counterpart.
            if q.0 < 0.0 || q.1 < 0.0 || q.0 > wmax || q.1 > hmax {
                continue;
            }
            src.push((x as f64, y as f64));
            dst.push(q);
        }
    }
    fit_correspondences(&src, &dst, opts)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Scale of the input-to-output fit; absent when the fit was degenerate.
    pub scale: Option<f64>,
    pub cropping: Option<f64>,
    pub distortion: Option<f64>,
    pub inliers: Option<usize>,
    /// Camera path of the output video at this frame.
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cropping_ratio: f64,
    pub distortion_value: f64,
    pub stability_score: f64,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_pair(input: &VideoSequence, output: &VideoSequence) -> Result<()> {
    if input.len() != output.len() {
        return Err(Error::Dimensions(format!(
            "input has {} frames, output has {}",
            input.len(),
            output.len()
        )));
    }
    if input.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    Ok(())
}

/// Input-to-output fit for every frame; degenerate frames are `None`.
pub fn frame_fits(
    input: &VideoSequence,
    output: &VideoSequence,
    estimator: &dyn FlowEstimator,
    opts: &FitOptions,
) -> Result<Vec<Option<Fit>>> {
    check_pair(input, output)?;
    let results: Vec<Result<Fit>> = input
        .frames()
        .par_iter()
        .zip(output.frames().par_iter())
        .map(|(a, b)| fit_homography(a, b, estimator, opts))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(f) => Ok(Some(f)),
            Err(Error::Degenerate(m)) => {
                log::warn!("frame {i}: {m}; skipped");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Share of the frame kept by a fit: `1 / scale`, clamped to (0, 1].
pub fn cropping_of(h: &Homography) -> f64 {
    (1.0 / h.scale()).min(1.0)
}

fn aggregate(fits: &[Option<Fit>], f: impl Fn(&Homography) -> f64, reduce: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let values: Vec<f64> = fits.iter().flatten().map(|fit| f(&fit.homography)).collect();
    if values.is_empty() {
        return Err(Error::Degenerate("every frame's fit was degenerate".into()));
    }
    Ok(reduce(&values))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn minimum(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn cropping_ratio(
    input: &VideoSequence,
    output: &VideoSequence,
    estimator: &dyn FlowEstimator,
    opts: &FitOptions,
) -> Result<f64> {
    aggregate(&frame_fits(input, output, estimator, opts)?, cropping_of, mean)
}

pub fn distortion_value(
    input: &VideoSequence,
    output: &VideoSequence,
    estimator: &dyn FlowEstimator,
    opts: &FitOptions,
) -> Result<f64> {
    aggregate(&frame_fits(input, output, estimator, opts)?, Homography::distortion, minimum)
}

/// Accumulated camera path: consecutive-frame fits composed from frame 0,
/// read at the frame center. Degenerate steps are replaced by the mean of
/// the neighboring steps.
pub fn camera_path(video: &VideoSequence, estimator: &dyn FlowEstimator, opts: &FitOptions) -> Result<TrajectorySignal> {
    let n = video.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let frames = video.frames();
    let steps: Vec<Result<Fit>> = (0..n - 1)
        .into_par_iter()
        .map(|i| fit_homography(&frames[i], &frames[i + 1], estimator, opts))
        .collect();
    let mut fitted: Vec<Option<Homography>> = Vec::with_capacity(n - 1);
    for (i, s) in steps.into_iter().enumerate() {
        match s {
            Ok(f) => fitted.push(Some(f.homography)),
            Err(Error::Degenerate(m)) => {
                log::warn!("camera path step {i}->{}: {m}; interpolated", i + 1);
                fitted.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if fitted.iter().all(Option::is_none) {
        return Err(Error::Degenerate("no consecutive pair could be fitted".into()));
    }
    let step = |i: usize| -> Homography {
        if let Some(h) = fitted[i] {
            return h;
        }
        let neighbors: Vec<Homography> = [i.checked_sub(1), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter_map(|j| fitted.get(j).copied().flatten())
            .collect();
        if neighbors.is_empty() {
            return Homography::IDENTITY;
        }
        let mut m = [[0.0; 3]; 3];
        for h in &neighbors {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += h.m[r][c] / neighbors.len() as f64;
                }
            }
        }
        Homography { m }
    };
    let (h, w, _) = video.shape().expect("nonempty");
    let center = frame_center(h, w);
    let mut path = TrajectorySignal::zeros(n);
    let mut acc = Homography::IDENTITY;
    for i in 1..n {
        acc = step(i - 1).compose(&acc);
        let (x, y) = acc.apply(center.0, center.1);
        path.tx[i] = x - center.0;
        path.ty[i] = y - center.1;
        path.theta[i] = acc.angle();
    }
    Ok(path)
}

/// Signals whose standard deviation stays below these floors are treated as
/// constant, since their spectrum is measurement noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityOptions {
    pub translation_floor: f64,
    pub rotation_floor: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            translation_floor: 0.02,
            rotation_floor: 2e-4,
        }
    }
}

impl StabilityOptions {
    pub const EXACT: StabilityOptions = StabilityOptions {
        translation_floor: 0.0,
        rotation_floor: 0.0,
    };
}

pub const MIN_STABILITY_FRAMES: usize = 16;

/// One-sided energy spectrum `|X_k|^2` for `k = 0..=n/2`.
pub fn energy_spectrum(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Energy in the five lowest non-DC bins over all non-DC energy. A signal
/// with no non-DC energy (or spread below `floor`) scores 1.
pub fn spectral_stability(signal: &[f64], floor: f64) -> Result<f64> {
    let n = signal.len();
    if n < MIN_STABILITY_FRAMES {
        return Err(Error::TooShort {
            needed: MIN_STABILITY_FRAMES,
            got: n,
        });
    }
    let m = signal.iter().sum::<f64>() / n as f64;
    let std = (signal.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = signal.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if std <= floor || std <= 1e-12 * scale {
        return Ok(1.0);
    }
    let e = energy_spectrum(signal);
    let total: f64 = e[1..].iter().sum();
    let low: f64 = e[1..e.len().min(6)].iter().sum();
    Ok(low / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStability {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub score: f64,
}

pub fn path_stability(path: &TrajectorySignal, opts: &StabilityOptions) -> Result<PathStability> {
    let tx = spectral_stability(&path.tx, opts.translation_floor)?;
    let ty = spectral_stability(&path.ty, opts.translation_floor)?;
    let theta = spectral_stability(&path.theta, opts.rotation_floor)?;
    Ok(PathStability {
        tx,
        ty,
        theta,
        score: tx.min(ty).min(theta),
    })
}

pub fn stability_score(
    video: &VideoSequence,
    estimator: &dyn FlowEstimator,
    fit: &FitOptions,
    opts: &StabilityOptions,
) -> Result<f64> {
    if video.len() < MIN_STABILITY_FRAMES {
        return Err(Error::TooShort {
            needed: MIN_STABILITY_FRAMES,
            got: video.len(),
        });
    }
    Ok(path_stability(&camera_path(video, estimator, fit)?, opts)?.score)
}

/// Energy above DFT bin `bin` summed over the three path signals.
pub fn high_frequency_energy(path: &TrajectorySignal, bin: usize) -> [f64; 3] {
    path.signals().map(|s| energy_spectrum(s).iter().skip(bin + 1).sum())
}

/// All three metrics for a stabilized video against its input.
pub fn evaluate(
    input: &VideoSequence,
    output: &VideoSequence,
    estimator: &dyn FlowEstimator,
    fit: &FitOptions,
    stability: &StabilityOptions,
) -> Result<MetricReport> {
    let fits = frame_fits(input, output, estimator, fit)?;
    let cropping_ratio = aggregate(&fits, cropping_of, mean)?;
    let distortion_value = aggregate(&fits, Homography::distortion, minimum)?;
    let path = camera_path(output, estimator, fit)?;
    let stability_score = path_stability(&path, stability)?.score;
    let per_frame = fits
        .iter()
        .enumerate()
        .map(|(i, f)| FrameMetrics {
            frame: i,
            scale: f.map(|f| f.homography.scale()),
            cropping: f.map(|f| cropping_of(&f.homography)),
            distortion: f.map(|f| f.homography.distortion()),
            inliers: f.map(|f| f.inliers),
            tx: path.tx[i],
            ty: path.ty[i],
            theta: path.theta[i],
        })
        .collect();
    Ok(MetricReport {
        cropping_ratio,
        distortion_value,
        stability_score,
        per_frame,
    })
}
